"""SNLI-format JSONL ingestion, semi-sorting and padded batching."""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .embeddings import NULL_ID, lookup
from .errors import DataError

log = logging.getLogger(__name__)

LABELS = {"entailment": 0, "contradiction": 1, "neutral": 2}
LABEL_NAMES = ["entailment", "contradiction", "neutral"]
NO_GOLD = "--"

# Semi-sort length bands; a pair falls in the first band whose bound both
# raw (NULL-free) sentence lengths are below.
SORT_BANDS = (20, 50)


@dataclass(frozen=True)
class Example:
    premise_ids: tuple
    hypothesis_ids: tuple
    label: int

    def __post_init__(self):
        for ids in (self.premise_ids, self.hypothesis_ids):
            if len(ids) < 1 or ids[0] != NULL_ID:
                raise ValueError("example sequences must start with the NULL id")


class Skip:
    """Returned by ``parse_snli_line`` for pairs without a gold label."""

    def __repr__(self):
        return "SKIP"


SKIP = Skip()


@dataclass
class LoadStats:
    kept: int = 0
    skipped: int = 0

    @property
    def total(self):
        return self.kept + self.skipped


@dataclass(frozen=True)
class Batch:
    premise_ids: np.ndarray      # [B, la_max] int64, padding holds 0
    premise_mask: np.ndarray     # [B, la_max] bool
    hypothesis_ids: np.ndarray
    hypothesis_mask: np.ndarray
    labels: np.ndarray           # [B] int64

    def __len__(self):
        return self.labels.shape[0]

    def unpad(self):
        """Recover the original examples from the grids and masks."""
        return [
            Example(
                tuple(int(t) for t in self.premise_ids[r][self.premise_mask[r]]),
                tuple(int(t) for t in self.hypothesis_ids[r][self.hypothesis_mask[r]]),
                int(self.labels[r]),
            )
            for r in range(len(self))
        ]


def tokenize_from_parse(parse):
    """Leaf tokens of a bracketed (non-binary) parse string, in order."""
    tokens = []
    for piece in parse.split():
        if piece.startswith("("):
            continue
        piece = piece.rstrip(")")
        if piece:
            tokens.append(piece)
    if not tokens:
        raise DataError(f"parse has no leaf tokens: {parse!r}")
    return tokens


def _record_fields(line, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", line=lineno) from None
    if not isinstance(obj, dict):
        raise DataError("record is not a JSON object", line=lineno)
    for key in ("gold_label", "sentence1_parse", "sentence2_parse"):
        if key not in obj:
            raise DataError(f"missing field {key!r}", line=lineno)
    return obj


def parse_snli_tokens(line, lineno=None):
    """Return ``(premise_tokens, hypothesis_tokens, label)`` or ``SKIP``."""
    obj = _record_fields(line, lineno)
    gold = obj["gold_label"]
    if gold == NO_GOLD:
        return SKIP
    if gold not in LABELS:
        raise DataError(f"unknown gold_label {gold!r}", line=lineno)
    try:
        premise = tokenize_from_parse(obj["sentence1_parse"])
        hypothesis = tokenize_from_parse(obj["sentence2_parse"])
    except DataError as exc:
        raise DataError(exc.message, line=lineno) from None
    return premise, hypothesis, LABELS[gold]


def parse_snli_line(line, vocab, lineno=None):
    """Parse one JSONL record into an ``Example`` (NULL-prepended) or ``SKIP``."""
    parsed = parse_snli_tokens(line, lineno)
    if parsed is SKIP:
        return SKIP
    premise, hypothesis, label = parsed
    return Example(
        (NULL_ID, *(lookup(t, vocab) for t in premise)),
        (NULL_ID, *(lookup(t, vocab) for t in hypothesis)),
        label,
    )


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield lineno, line


def read_corpus_tokens(paths):
    """All leaf tokens of the labeled pairs in ``paths`` (for vocabulary building)."""
    tokens = set()
    for path in paths:
        for lineno, line in _lines(path):
            try:
                parsed = parse_snli_tokens(line, lineno)
            except DataError as exc:
                raise DataError(exc.message, path, lineno) from None
            if parsed is not SKIP:
                tokens.update(parsed[0])
                tokens.update(parsed[1])
    return tokens


def load_snli(path, vocab):
    """Read a whole JSONL split. Returns ``(examples, LoadStats)``."""
    examples = []
    stats = LoadStats()
    for lineno, line in _lines(path):
        try:
            ex = parse_snli_line(line, vocab, lineno)
        except DataError as exc:
            raise DataError(exc.message, path, lineno) from None
        if ex is SKIP:
            stats.skipped += 1
        else:
            stats.kept += 1
            examples.append(ex)
    if stats.skipped:
        log.info("%s: kept %d pairs, skipped %d without gold label", path, stats.kept, stats.skipped)
    return examples, stats


def length_band(example):
    """0, 1 or 2: the semi-sort group of a pair, using NULL-free lengths."""
    longest = max(len(example.premise_ids), len(example.hypothesis_ids)) - 1
    for band, bound in enumerate(SORT_BANDS):
        if longest < bound:
            return band
    return len(SORT_BANDS)


def semi_sort(examples, rng_seed, epoch=0):
    """Group pairs by length band (short first) and shuffle inside each band.

    The shuffle is seeded by ``(rng_seed, epoch)`` so each epoch reorders.
    """
    rng = np.random.default_rng([rng_seed, epoch])
    groups = [[] for _ in range(len(SORT_BANDS) + 1)]
    for ex in examples:
        groups[length_band(ex)].append(ex)
    out = []
    for group in groups:
        order = rng.permutation(len(group))
        out.extend(group[i] for i in order)
    return out


def _pad(seqs):
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def make_batch(examples):
    p_ids, p_mask = _pad([ex.premise_ids for ex in examples])
    h_ids, h_mask = _pad([ex.hypothesis_ids for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(p_ids, p_mask, h_ids, h_mask, labels)


def make_batches(examples, batch_size=4):
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [
        make_batch(examples[i : i + batch_size])
        for i in range(0, len(examples), batch_size)
    ]
