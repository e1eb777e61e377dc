import gzip
import logging

import numpy as np
import pytest

from danli.embeddings import (
    NULL_ID,
    EmbeddingTable,
    Vocab,
    embed_sentence,
    fnv1a_64,
    load_pretrained,
    lookup,
    oov_bucket,
)
from danli.errors import DataError


def fnv1a_64_oracle(text):
    # Independent route: numpy uint64 arithmetic wraps modulo 2**64 by itself.
    h = np.uint64(14695981039346656037)
    prime = np.uint64(1099511628211)
    with np.errstate(over="ignore"):
        for byte in text.encode("utf-8"):
            h = np.uint64(h ^ np.uint64(byte)) * prime
    return int(h)


@pytest.mark.parametrize(
    "text, expected",
    [("", 0xCBF29CE484222325), ("a", 0xAF63DC4C8601EC8C), ("foobar", 0x85944171F73967E8)],
)
def test_fnv1a_published_vectors(text, expected):
    assert fnv1a_64(text) == expected


@pytest.mark.parametrize("token", ["zyzzyva", "Über", "-RRB-", "日本", "a b"])
def test_fnv1a_matches_independent_implementation(token):
    assert fnv1a_64(token) == fnv1a_64_oracle(token)


def write_vectors(path, rows, dim):
    with open(path, "w") as fh:
        for tok, vec in rows:
            fh.write(tok + " " + " ".join(str(v) for v in vec) + "\n")


def test_lookup_reserved_known_and_unknown():
    vocab = Vocab(["cat", "dog"])
    assert lookup("NULL", vocab) == NULL_ID
    assert lookup("cat", vocab) == 101 and lookup("dog", vocab) == 102
    b = lookup("wug", vocab)
    assert 1 <= b <= 100
    assert b == lookup("wug", vocab) == 1 + fnv1a_64_oracle("wug") % 100


def test_oov_buckets_all_hit():
    hits = {oov_bucket(f"tok{i}") for i in range(100_000)}
    assert hits == set(range(1, 101))


def test_lowercase_flag():
    vocab = Vocab(["cat"], lowercase=True)
    assert lookup("Cat", vocab) == lookup("cat", vocab) == 101
    assert lookup("Cat", Vocab(["cat"])) != 101


def test_load_normalizes_rows(tmp_path):
    path = tmp_path / "v.txt"
    write_vectors(path, [("cat", [3, 4, 0, 0]), ("dog", [0, 0, 0, 2])], 4)
    table, vocab = load_pretrained(path, {"cat", "dog", "eel"}, dim=4)
    assert len(table) == 103 and vocab.words == ["cat", "dog"]
    np.testing.assert_allclose(table.vectors[101], [0.6, 0.8, 0, 0], atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(table.vectors, axis=1), 1.0, atol=1e-6)


def test_load_only_keeps_requested_tokens(tmp_path):
    path = tmp_path / "v.txt"
    write_vectors(path, [("cat", [1, 0]), ("dog", [0, 1])], 2)
    _, vocab = load_pretrained(path, {"dog"}, dim=2)
    assert vocab.words == ["dog"]


def test_reserved_rows_are_seeded(tmp_path):
    path = tmp_path / "v.txt"
    write_vectors(path, [("cat", [1, 2, 3])], 3)
    t1, _ = load_pretrained(path, None, dim=3, seed=4)
    t2, _ = load_pretrained(path, None, dim=3, seed=4)
    t3, _ = load_pretrained(path, None, dim=3, seed=5)
    assert t1.vectors.tobytes() == t2.vectors.tobytes()
    assert not np.array_equal(t1.vectors[:101], t3.vectors[:101])


def test_zero_vector_replaced_with_warning(tmp_path, caplog):
    path = tmp_path / "v.txt"
    write_vectors(path, [("cat", [0] * 5)], 5)
    with caplog.at_level(logging.WARNING):
        table, vocab = load_pretrained(path, None, dim=5)
    assert "zero vector" in caplog.text
    assert abs(np.linalg.norm(table.vectors[vocab.token_to_id["cat"]]) - 1) < 1e-12


def test_duplicate_token_first_wins(tmp_path, caplog):
    path = tmp_path / "v.txt"
    write_vectors(path, [("cat", [1, 0]), ("cat", [0, 1])], 2)
    with caplog.at_level(logging.WARNING):
        table, vocab = load_pretrained(path, None, dim=2)
    assert "duplicate" in caplog.text
    np.testing.assert_array_equal(table.vectors[101], [1, 0])
    assert len(vocab) == 102


def test_malformed_lines_report_line_number(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("cat 1 2\ndog 1\n")
    with pytest.raises(DataError, match=":2:"):
        load_pretrained(path, None, dim=2)
    path.write_text("cat 1 2\ndog 1 x\n")
    with pytest.raises(DataError, match=":2: unparsable"):
        load_pretrained(path, None, dim=2)


def test_dimension_mismatch(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("cat 1 2 3\n")
    with pytest.raises(DataError, match="dimension 3"):
        load_pretrained(path, None)
    table, _ = load_pretrained(path, None, dim=3)
    assert table.dim == 3


def test_gzip_is_transparent(tmp_path):
    plain = tmp_path / "v.txt"
    write_vectors(plain, [("cat", [1, 2]), ("dog", [2, 1])], 2)
    zipped = tmp_path / "v.txt.gz"
    with gzip.open(zipped, "wt") as fh:
        fh.write(plain.read_text())
    a, va = load_pretrained(plain, None, dim=2)
    b, vb = load_pretrained(zipped, None, dim=2)
    assert va == vb and a.vectors.tobytes() == b.vectors.tobytes()


def test_table_rows_are_read_only():
    table = EmbeddingTable(np.eye(3))
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 2.0


def test_embed_sentence():
    table = EmbeddingTable(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(embed_sentence([0], table), table.vectors[[0]])
    out = embed_sentence([0, 2], table)
    np.testing.assert_array_equal(out[1], table.vectors[2])
    np.testing.assert_array_equal(embed_sentence([0, 3, 1], table)[1:], embed_sentence([0, 1, 3], table)[[2, 1]])
    with pytest.raises(IndexError):
        embed_sentence([0, 4], table)


def test_vocab_json_roundtrip():
    v = Vocab(["a", "b"], lowercase=True)
    assert Vocab.from_json(v.to_json()) == v
