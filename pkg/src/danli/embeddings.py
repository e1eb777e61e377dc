"""Fixed pretrained word vectors, vocabulary and OOV hashing.

Id layout: 0 is the NULL token, 1..100 are OOV buckets, and the remaining ids
are the corpus tokens found in the pretrained file, in file order.
"""

import gzip
import logging

import numpy as np

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

NULL_TOKEN = "NULL"
NULL_ID = 0
NUM_OOV = 100
FIRST_WORD_ID = 1 + NUM_OOV

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(text):
    """64-bit FNV-1a over the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def oov_bucket(token):
    return 1 + fnv1a_64(token) % NUM_OOV


class Vocab:
    """Token <-> id tables with the reserved NULL and OOV ids."""

    def __init__(self, words=(), lowercase=False):
        self.lowercase = lowercase
        self.id_to_token = [NULL_TOKEN] + [f"<oov:{k}>" for k in range(1, NUM_OOV + 1)]
        self.token_to_id = {NULL_TOKEN: NULL_ID}
        for w in words:
            self.add(w)

    def add(self, token):
        if token in self.token_to_id:
            raise ValueError(f"duplicate vocabulary token {token!r}")
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)
        return self.token_to_id[token]

    @property
    def words(self):
        """Corpus tokens in id order (reserved entries excluded)."""
        return self.id_to_token[FIRST_WORD_ID:]

    def __len__(self):
        return len(self.id_to_token)

    def __eq__(self, other):
        return (
            isinstance(other, Vocab)
            and self.lowercase == other.lowercase
            and self.id_to_token == other.id_to_token
        )

    def encode(self, tokens):
        return [lookup(t, self) for t in tokens]

    def to_json(self):
        return {"lowercase": self.lowercase, "words": list(self.words)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["words"], lowercase=bool(obj["lowercase"]))


def lookup(token, vocab):
    """Id of ``token``; unknown tokens hash to one of the OOV buckets."""
    if token == NULL_TOKEN:
        return NULL_ID
    if vocab.lowercase:
        token = token.lower()
    idx = vocab.token_to_id.get(token)
    if idx is None:
        return oov_bucket(token)
    return idx


class EmbeddingTable:
    """Read-only matrix of unit-norm embedding rows."""

    def __init__(self, vectors, seed=0):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ShapeError(f"embedding table must be 2-D, got {vectors.shape}")
        vectors.setflags(write=False)
        self.vectors = vectors
        self.seed = seed

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_rows(count, dim, seed):
    """Gaussian(0, 1) rows, normalized to unit length."""
    rng = np.random.default_rng(seed)
    return _unit_rows(rng.standard_normal((count, dim)))


def _open_text(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def load_pretrained(path, vocab_tokens=None, dim=300, seed=0, lowercase=False):
    """Read a GloVe-style text file into ``(EmbeddingTable, Vocab)``.

    Only tokens in ``vocab_tokens`` are kept (all tokens when it is None).
    The file may be gzip-compressed.
    """
    if vocab_tokens is not None:
        vocab_tokens = {t.lower() for t in vocab_tokens} if lowercase else set(vocab_tokens)
    vocab = Vocab(lowercase=lowercase)
    rows = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != dim + 1:
                if lineno == 1:
                    raise DataError(
                        f"embedding dimension {len(fields) - 1} != configured {dim}",
                        path, lineno,
                    )
                raise DataError(
                    f"expected {dim + 1} fields, found {len(fields)}", path, lineno
                )
            token = fields[0]
            if lowercase:
                token = token.lower()
            if token == NULL_TOKEN:
                log.debug("%s:%d: reserved token NULL ignored", path, lineno)
                continue
            if vocab_tokens is not None and token not in vocab_tokens:
                continue
            if token in vocab.token_to_id:
                log.warning("%s:%d: duplicate token %r, keeping first", path, lineno, token)
                continue
            try:
                vec = np.array(fields[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"unparsable number ({exc})", path, lineno) from None
            if not np.isfinite(vec).all():
                raise DataError("non-finite value", path, lineno)
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                log.warning("%s:%d: zero vector for %r replaced by a random row", path, lineno, token)
                vec = random_rows(1, dim, (seed, fnv1a_64(token)))[0]
            else:
                vec = vec / norm
            vocab.add(token)
            rows.append(vec)
    reserved = random_rows(FIRST_WORD_ID, dim, seed)
    table = np.vstack([reserved, *rows])
    return EmbeddingTable(table, seed=seed), vocab


def embed_sentence(ids, table):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(table)):
        raise IndexError(f"token id out of range [0, {len(table)})")
    return table.vectors[ids]
