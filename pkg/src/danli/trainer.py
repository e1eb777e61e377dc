"""Adagrad training loop, evaluation and binary checkpoints."""

import dataclasses
import io
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .embeddings import EmbeddingTable, Vocab
from .errors import (
    BadMagicError,
    CheckpointError,
    NumericError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .snli_data import LABEL_NAMES, make_batches, semi_sort

log = logging.getLogger(__name__)

INITIAL_ACCUMULATOR = 0.1
MAGIC = b"DANLI"
FORMAT_VERSION = 1


def default_learning_rate(model_config):
    return 0.025 if model_config.use_intra else 0.05


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    accumulators: dict
    learning_rate: float

    @classmethod
    def create(cls, params, learning_rate, initial=INITIAL_ACCUMULATOR):
        return cls({k: np.full_like(p, initial) for k, p in params.items()}, learning_rate)


def adagrad_step(param, grad, accum, lr):
    """One Adagrad update. Returns new ``(param, accum)`` arrays.

    The squared gradient is accumulated first, then used for the step.
    """
    if param.shape != grad.shape or grad.shape != accum.shape:
        raise ValueError(f"shape mismatch: {param.shape}, {grad.shape}, {accum.shape}")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient")
    accum = accum + grad * grad
    return param - lr * grad / np.sqrt(accum), accum


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    correct: int
    total: int
    per_class: dict   # label name -> {"correct", "total", "accuracy"}

    def to_json(self):
        return dataclasses.asdict(self)


def evaluate(params, config, table, examples, batch_size=32):
    """Accuracy overall and per gold class, with dropout disabled."""
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    gold, pred = [], []
    for batch in make_batches(list(examples), batch_size):
        gold.append(batch.labels)
        pred.append(M.predict(batch, params, config, table))
    gold = np.concatenate(gold)
    pred = np.concatenate(pred)
    hit = gold == pred
    per_class = {}
    for c, name in enumerate(LABEL_NAMES):
        sel = gold == c
        n = int(sel.sum())
        k = int(hit[sel].sum())
        per_class[name] = {"correct": k, "total": n, "accuracy": k / n if n else None}
    return EvalReport(float(hit.mean()), int(hit.sum()), int(gold.size), per_class)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: M.ModelConfig
    vocab: Vocab
    params: dict
    optimizer: OptimizerState = None
    step: int = 0
    seeds: dict = field(default_factory=dict)
    embeddings: EmbeddingTable = None
    dev_accuracy: float = None


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _tensor_items(ckpt):
    items = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is not None:
        items += [(f"accum/{k}", v) for k, v in ckpt.optimizer.accumulators.items()]
    if ckpt.embeddings is not None:
        items.append(("embeddings", ckpt.embeddings.vectors))
    return items


def checkpoint_bytes(ckpt):
    items = _tensor_items(ckpt)
    meta = {
        "config": ckpt.config.to_json(),
        "vocab": ckpt.vocab.to_json(),
        "step": ckpt.step,
        "seeds": ckpt.seeds,
        "learning_rate": None if ckpt.optimizer is None else ckpt.optimizer.learning_rate,
        "dev_accuracy": ckpt.dev_accuracy,
        "embedding_seed": None if ckpt.embeddings is None else ckpt.embeddings.seed,
        "tensors": [[name, int(v.shape[0]), int(v.shape[1])] for name, v in items],
    }
    out = io.BytesIO()
    out.write(MAGIC + bytes([FORMAT_VERSION]))
    blob = _canonical_json(meta)
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    for name, v in items:
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<II", v.shape[0], v.shape[1]))
        out.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(ckpt, path):
    data = checkpoint_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data):
    r = _Reader(data)
    head = data[: len(MAGIC)]
    if len(head) < len(MAGIC) and MAGIC.startswith(head) and head:
        raise TruncatedCheckpointError("checkpoint truncated inside the magic header")
    if head != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    r.take(len(MAGIC))
    (version,) = r.take(1)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint format version {version}")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata ({exc})") from None
    if not isinstance(meta, dict) or not isinstance(meta.get("tensors"), list):
        raise CheckpointError("checkpoint metadata lacks a tensor table")
    tensors = {}
    for name, rows, cols in meta["tensors"]:
        (n,) = r.unpack("<I")
        got = r.take(n).decode("utf-8", errors="replace")
        got_rows, got_cols = r.unpack("<II")
        if (got, got_rows, got_cols) != (name, rows, cols):
            raise CheckpointError(f"tensor header {got!r} {got_rows}x{got_cols} does not match metadata")
        arr = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes in checkpoint")

    try:
        return _build_checkpoint(meta, tensors)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint contents ({exc})") from None


def _build_checkpoint(meta, tensors):
    config = M.ModelConfig.from_json(meta["config"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    M.check_params(params, config)
    optimizer = None
    if meta["learning_rate"] is not None:
        accum = {k[len("accum/"):]: v for k, v in tensors.items() if k.startswith("accum/")}
        optimizer = OptimizerState(accum, meta["learning_rate"])
    embeddings = None
    if "embeddings" in tensors:
        embeddings = EmbeddingTable(tensors["embeddings"], seed=meta["embedding_seed"])
    return Checkpoint(
        config=config,
        vocab=Vocab.from_json(meta["vocab"]),
        params=params,
        optimizer=optimizer,
        step=meta["step"],
        seeds=meta["seeds"],
        embeddings=embeddings,
        dev_accuracy=meta["dev_accuracy"],
    )


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = None     # None: 0.05 vanilla, 0.025 intra
    dropout: float = 0.2
    max_steps: int = 50_000_000
    eval_every: int = 10_000
    checkpoint_every: int = 10_000
    log_every: int = 1_000
    worker_count: int = 1
    seed: int = 0                   # parameter init
    init_scale: float = M.INIT_SCALE
    shuffle_seed: int = 0
    dropout_seed: int = 0
    target_accuracy: float = None   # stop once dev accuracy reaches this
    output_dir: str = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def seeds(self):
        return {"init": self.seed, "shuffle": self.shuffle_seed, "dropout": self.dropout_seed}


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _batch_stream(examples, batch_size, shuffle_seed):
    epoch = 0
    while True:
        for batch in make_batches(semi_sort(examples, shuffle_seed, epoch), batch_size):
            yield batch
        epoch += 1


class _SharedState:
    """Parameters and accumulators shared by training workers.

    Each tensor has its own lock; an accumulate-then-update is atomic per
    tensor, while different tensors may be updated concurrently.
    """

    def __init__(self, params, optimizer):
        self.params = params
        self.optimizer = optimizer
        self.locks = {k: threading.Lock() for k in params}

    def apply(self, grads):
        acc = self.optimizer.accumulators
        for k, g in grads.items():
            with self.locks[k]:
                self.params[k], acc[k] = adagrad_step(
                    self.params[k], g, acc[k], self.optimizer.learning_rate
                )

    def snapshot(self):
        return dict(self.params)


def train(train_config, model_config, train_examples, table, vocab, dev_examples=None,
          log_sink=None):
    """Run Adagrad and return the checkpoint with the best dev accuracy.

    Ties in dev accuracy keep the earlier step. Without dev data the final
    state is returned. ``log_sink`` receives one dict per log record.
    """
    tc = train_config
    if not train_examples:
        raise ValueError("no training examples")
    config = dataclasses.replace(model_config, dropout_ratio=tc.dropout)
    lr = tc.learning_rate if tc.learning_rate is not None else default_learning_rate(config)
    params = M.init_params(config, seed=tc.seed, scale=tc.init_scale)
    state = _SharedState(params, OptimizerState.create(params, lr))
    stream = _batch_stream(list(train_examples), tc.batch_size, tc.shuffle_seed)
    stream_lock = threading.Lock()
    step = 0          # updates issued so far; also the dropout-seed counter
    losses = []

    def snapshot_ckpt(dev_acc=None):
        return Checkpoint(
            config=config,
            vocab=vocab,
            params=dict(state.params),
            optimizer=OptimizerState(dict(state.optimizer.accumulators), lr),
            step=step,
            seeds=tc.seeds(),
            embeddings=table,
            dev_accuracy=dev_acc,
        )

    def run_one():
        nonlocal step
        with stream_lock:
            batch = next(stream)
            step += 1
            my_step = step
        loss, grads = M.batch_loss_and_grads(
            batch, state.snapshot(), config, table, seed=tc.dropout_seed * 1_000_003 + my_step
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at step {my_step}")
        state.apply(grads)
        losses.append(loss)

    def run_segment(n_steps):
        if tc.worker_count == 1:
            for _ in range(n_steps):
                run_one()
            return
        remaining = [n_steps]
        failure = []
        guard = threading.Lock()

        def worker():
            while not failure:
                with guard:
                    if remaining[0] == 0:
                        return
                    remaining[0] -= 1
                try:
                    run_one()
                except Exception as exc:  # re-raised in the calling thread
                    failure.append(exc)
                    return

        threads = [threading.Thread(target=worker) for _ in range(tc.worker_count)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failure:
            raise failure[0]

    def emit(record):
        if log_sink is not None:
            log_sink(record)
        log.info("%s", json.dumps(record, sort_keys=True))

    def save(ckpt, name):
        if tc.output_dir:
            save_checkpoint(ckpt, os.path.join(tc.output_dir, name))

    if tc.output_dir:
        os.makedirs(tc.output_dir, exist_ok=True)
    best = None
    last_good = snapshot_ckpt()
    boundaries = sorted(
        {s for every in (tc.eval_every, tc.checkpoint_every, tc.log_every) if every
         for s in range(every, tc.max_steps, every)} | {tc.max_steps}
    )
    for target in boundaries:
        try:
            run_segment(target - step)
        except NumericError as exc:
            save(last_good, "last_good.ckpt")
            raise TrainingAborted(str(exc), best or last_good) from exc
        record = {"step": step}
        if losses:
            record["train_loss"] = float(np.mean(losses))
        losses.clear()
        at_boundary = step == tc.max_steps
        at_eval = dev_examples and (at_boundary or tc.eval_every and step % tc.eval_every == 0)
        stop = False
        if at_eval:
            acc = evaluate(state.params, config, table, dev_examples).accuracy
            record["dev_accuracy"] = acc
            if best is None or acc > best.dev_accuracy:
                best = snapshot_ckpt(acc)
                save(best, "best.ckpt")
            stop = tc.target_accuracy is not None and acc >= tc.target_accuracy
        last_good = snapshot_ckpt()
        if at_boundary or tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save(last_good, "last.ckpt")
        emit(record)
        if stop:
            break
    return best if best is not None else last_good
