import os

import numpy as np
import pytest

from danli import model as M
from danli import synthetic
from danli.embeddings import EmbeddingTable, load_pretrained, random_rows
from danli.snli_data import load_snli, read_corpus_tokens

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
FIXTURE_50 = os.path.join(DATA_DIR, "snli_fixture_50.jsonl")
FIXTURE_50_SKIPPED = 7


def numeric_vjp(f, x, dout, eps=1e-5):
    """Central-difference estimate of d<dout, f(x)>/dx."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up = x.copy()
        up[idx] += eps
        down = x.copy()
        down[idx] -= eps
        grad[idx] = (np.sum(dout * f(up)) - np.sum(dout * f(down))) / (2 * eps)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def toy_config(use_intra=False, **kw):
    base = dict(embed_dim_in=6, proj_dim=7, hidden=5, distance_cap=2, use_intra=use_intra,
                dropout_ratio=0.2)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_table():
    return EmbeddingTable(random_rows(40, 6, seed=3), seed=3)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    synthetic.write_corpus(d / "train.jsonl", 200, seed=1)
    synthetic.write_corpus(d / "dev.jsonl", 30, seed=2)
    synthetic.write_corpus(d / "test.jsonl", 30, seed=3, unlabeled_every=10)
    synthetic.write_vectors(d / "vectors.txt")
    return d


@pytest.fixture(scope="session")
def synth_data(synth_dir):
    paths = [synth_dir / f"{s}.jsonl" for s in ("train", "dev", "test")]
    table, vocab = load_pretrained(synth_dir / "vectors.txt", read_corpus_tokens(paths))
    splits = {p.stem: load_snli(p, vocab)[0] for p in paths}
    return table, vocab, splits


# --- acceptance reporting --------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    notes = "; ".join(str(v) for k, v in item.user_properties if k == "note")
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE[number] = f"criterion {number:>2} {status}: {title}" + (f" ({notes})" if notes else "")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
