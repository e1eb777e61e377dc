"""Command-line entry point: ``danli {train,eval,predict,attend,bench,synth}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error.
"""

import argparse
import json
import logging
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import model as M
from . import synthetic
from . import trainer as T
from .embeddings import NULL_TOKEN, EmbeddingTable, load_pretrained, random_rows
from .errors import DataError, NumericError
from .snli_data import LABEL_NAMES, load_snli, read_corpus_tokens

log = logging.getLogger("danli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Flag destinations that a --config JSON file may set, with their defaults.
DEFAULTS = {
    "train": None,
    "dev": None,
    "test": None,
    "data": None,
    "embeddings": None,
    "checkpoint": None,
    "output_dir": None,
    "variant": "vanilla",
    "batch_size": 4,
    "lr": None,
    "dropout": 0.2,
    "max_steps": 50_000_000,
    "eval_every": 10_000,
    "checkpoint_every": 10_000,
    "log_every": 1_000,
    "init_scale": M.INIT_SCALE,
    "target_accuracy": None,
    "embed_dim": 300,
    "lowercase": False,
    "seed": 0,
    "workers": 1,
    "deterministic": False,
    "json": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_TOKEN_RE = re.compile(r"\w+(?:['-]\w+)*|[^\w\s]")


def tokenize_raw(text):
    """Whitespace tokenization with punctuation split off as separate tokens."""
    tokens = _TOKEN_RE.findall(text)
    if not tokens:
        raise DataError("empty sentence")
    return tokens


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _add_common(p, *names):
    S = argparse.SUPPRESS
    opts = {
        "train": lambda: p.add_argument("--train", metavar="PATH", default=S, help="training split (SNLI JSONL)"),
        "dev": lambda: p.add_argument("--dev", metavar="PATH", default=S, help="development split"),
        "test": lambda: p.add_argument("--test", metavar="PATH", default=S, help="test split"),
        "data": lambda: p.add_argument("--data", metavar="PATH", default=S, help="split to evaluate (defaults to --test, then --dev)"),
        "embeddings": lambda: p.add_argument("--embeddings", metavar="PATH", default=S, help="GloVe-format text vectors, optionally gzipped"),
        "checkpoint": lambda: p.add_argument("--checkpoint", metavar="PATH", default=S),
        "output_dir": lambda: p.add_argument("--output-dir", metavar="DIR", default=S),
        "variant": lambda: p.add_argument("--variant", choices=["vanilla", "intra"], default=S),
        "batch_size": lambda: p.add_argument("--batch-size", type=int, metavar="N", default=S, help="default 4"),
        "lr": lambda: p.add_argument("--lr", type=float, metavar="R", default=S, help="default 0.05 vanilla, 0.025 intra"),
        "dropout": lambda: p.add_argument("--dropout", type=float, metavar="R", default=S, help="default 0.2"),
        "max_steps": lambda: p.add_argument("--max-steps", type=int, metavar="N", default=S),
        "eval_every": lambda: p.add_argument("--eval-every", type=int, metavar="N", default=S),
        "checkpoint_every": lambda: p.add_argument("--checkpoint-every", type=int, metavar="N", default=S),
        "log_every": lambda: p.add_argument("--log-every", type=int, metavar="N", default=S),
        "init_scale": lambda: p.add_argument("--init-scale", type=float, metavar="SD", default=S, help="sd of the Gaussian weight init (default 0.01)"),
        "target_accuracy": lambda: p.add_argument("--target-accuracy", type=float, metavar="A", default=S, help="stop once dev accuracy reaches A"),
        "embed_dim": lambda: p.add_argument("--embed-dim", type=int, metavar="N", default=S, help="pretrained vector size (default 300)"),
        "lowercase": lambda: p.add_argument("--lowercase", action="store_true", default=S),
        "seed": lambda: p.add_argument("--seed", type=int, metavar="N", default=S),
        "workers": lambda: p.add_argument("--workers", type=int, metavar="N", default=S),
        "deterministic": lambda: p.add_argument("--deterministic", action="store_true", default=S, help="force single-worker sequential updates"),
        "json": lambda: p.add_argument("--json", action="store_true", default=S, help="emit JSON only"),
    }
    for name in names:
        opts[name]()
    p.add_argument("--config", metavar="PATH", help="JSON file with flag values; flags override it")


def build_parser():
    parser = _Parser(prog="danli", description="Decomposable attention NLI: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_common(p, "train", "dev", "test", "embeddings", "checkpoint", "output_dir", "variant",
                "batch_size", "lr", "dropout", "max_steps", "eval_every", "checkpoint_every",
                "log_every", "init_scale", "target_accuracy", "embed_dim", "lowercase", "seed",
                "workers", "deterministic")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy overall and per class")
    _add_common(p, "checkpoint", "data", "dev", "test", "embeddings", "json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one sentence pair")
    _add_common(p, "checkpoint", "embeddings", "json")
    p.add_argument("premise")
    p.add_argument("hypothesis")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attend", help="dump attention matrices for one pair as JSON")
    _add_common(p, "checkpoint", "embeddings")
    p.add_argument("premise")
    p.add_argument("hypothesis")
    p.set_defaults(func=cmd_attend_dump)

    p = sub.add_parser("bench", help="forward-pass throughput at several worker counts")
    _add_common(p, "checkpoint", "seed", "json")
    p.add_argument("--length", type=int, default=50, help="tokens per sentence, NULL included")
    p.add_argument("--dim", type=int, default=200, help="projection and hidden width for random params")
    p.add_argument("--worker-counts", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--pairs", type=int, default=20, help="pairs per timing run")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--mode", choices=["positions", "pairs"], default="positions",
                   help="parallelize over token positions inside a pair, or over pairs")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic SNLI-format corpus and vectors")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--dim", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def resolve_options(ns):
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(ns, "config", None):
        try:
            with open(ns.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {ns.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config file {ns.config}: expected a JSON object")
        unknown = sorted(set(cfg) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"config file {ns.config}: unknown keys {unknown}")
        opts.update(cfg)
    opts.update({k: v for k, v in vars(ns).items() if k in DEFAULTS})
    return argparse.Namespace(**{**vars(ns), **opts})


def _require(opts, *names):
    for name in names:
        if getattr(opts, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _check_file(path):
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(opts):
    _require(opts, "train", "embeddings")
    splits = [p for p in (opts.train, opts.dev, opts.test) if p]
    for path in splits + [opts.embeddings]:
        _check_file(path)
    tokens = read_corpus_tokens(splits)
    table, vocab = load_pretrained(opts.embeddings, tokens, dim=opts.embed_dim, seed=opts.seed,
                                   lowercase=opts.lowercase)
    train_ex, stats = load_snli(opts.train, vocab)
    log.info("train: %d pairs kept, %d skipped", stats.kept, stats.skipped)
    dev_ex = None
    if opts.dev:
        dev_ex, dstats = load_snli(opts.dev, vocab)
        log.info("dev: %d pairs kept, %d skipped", dstats.kept, dstats.skipped)
    model_config = M.ModelConfig(embed_dim_in=opts.embed_dim, use_intra=opts.variant == "intra",
                                 dropout_ratio=opts.dropout)
    output_dir = opts.output_dir or "."
    tc = T.TrainConfig(
        batch_size=opts.batch_size,
        learning_rate=opts.lr,
        dropout=opts.dropout,
        max_steps=opts.max_steps,
        eval_every=opts.eval_every,
        checkpoint_every=opts.checkpoint_every,
        log_every=opts.log_every,
        worker_count=1 if opts.deterministic else opts.workers,
        seed=opts.seed,
        shuffle_seed=opts.seed,
        dropout_seed=opts.seed,
        init_scale=opts.init_scale,
        target_accuracy=opts.target_accuracy,
        output_dir=output_dir,
    )
    os.makedirs(output_dir, exist_ok=True)
    log_path = os.path.join(output_dir, "train_log.jsonl")
    checkpoint = opts.checkpoint or os.path.join(output_dir, "model.ckpt")
    with open(log_path, "w", encoding="utf-8") as fh:

        def sink(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

        try:
            best = T.train(tc, model_config, train_ex, table, vocab, dev_examples=dev_ex,
                           log_sink=sink)
        except T.TrainingAborted as exc:
            T.save_checkpoint(exc.checkpoint, checkpoint)
            raise
    T.save_checkpoint(best, checkpoint)
    summary = {"checkpoint": checkpoint, "step": best.step, "dev_accuracy": best.dev_accuracy,
               "train_pairs": stats.kept, "skipped": stats.skipped, "log": log_path}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def load_model(opts):
    """Checkpoint plus an embedding table, from the checkpoint or --embeddings."""
    _require(opts, "checkpoint")
    _check_file(opts.checkpoint)
    ckpt = T.load_checkpoint(opts.checkpoint)
    if ckpt.embeddings is None:
        if not opts.embeddings:
            raise DataError("checkpoint carries no embedding table; pass --embeddings")
        _check_file(opts.embeddings)
        table, vocab = load_pretrained(opts.embeddings, set(ckpt.vocab.words),
                                       dim=ckpt.config.embed_dim_in,
                                       lowercase=ckpt.vocab.lowercase)
        if vocab != ckpt.vocab:
            raise DataError("embedding file does not reproduce the checkpoint vocabulary")
        ckpt.embeddings = table
    if ckpt.embeddings.dim != ckpt.config.embed_dim_in:
        raise DataError(
            f"embedding width {ckpt.embeddings.dim} != model input width {ckpt.config.embed_dim_in}"
        )
    if len(ckpt.embeddings) != len(ckpt.vocab):
        raise DataError(
            f"embedding table has {len(ckpt.embeddings)} rows for a vocabulary of {len(ckpt.vocab)}"
        )
    return ckpt


def format_report(report):
    lines = [f"{'class':<15}{'correct':>9}{'total':>9}{'accuracy':>10}"]
    for name in ("neutral", "entailment", "contradiction"):
        c = report.per_class[name]
        acc = "-" if c["accuracy"] is None else f"{100 * c['accuracy']:.2f}"
        lines.append(f"{name:<15}{c['correct']:>9}{c['total']:>9}{acc:>10}")
    lines.append(f"{'overall':<15}{report.correct:>9}{report.total:>9}{100 * report.accuracy:>10.2f}")
    return "\n".join(lines)


def cmd_eval(opts):
    path = opts.data or opts.test or opts.dev
    if path is None:
        raise UsageError("--data (or --test / --dev) is required")
    ckpt = load_model(opts)
    _check_file(path)
    examples, stats = load_snli(path, ckpt.vocab)
    if not examples:
        raise DataError(f"no labeled pairs in {path}")
    report = T.evaluate(ckpt.params, ckpt.config, ckpt.embeddings, examples)
    out = report.to_json()
    out["skipped"] = stats.skipped
    if not opts.json:
        print(format_report(report))
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _encode_pair(ckpt, premise, hypothesis):
    a = [NULL_TOKEN] + tokenize_raw(premise)
    b = [NULL_TOKEN] + tokenize_raw(hypothesis)
    return a, b, ckpt.vocab.encode(a), ckpt.vocab.encode(b)


def predict_pair(ckpt, premise, hypothesis):
    a, b, ids_a, ids_b = _encode_pair(ckpt, premise, hypothesis)
    logits, _ = M.forward(ids_a, ids_b, ckpt.params, ckpt.config, ckpt.embeddings)
    scores = M.softmax(logits[0])
    return {
        "label": LABEL_NAMES[int(np.argmax(logits[0]))],
        "scores": {name: float(s) for name, s in zip(LABEL_NAMES, scores)},
        "premise_tokens": a,
        "hypothesis_tokens": b,
    }


def cmd_predict(opts):
    ckpt = load_model(opts)
    result = predict_pair(ckpt, opts.premise, opts.hypothesis)
    if opts.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(result["label"])
        for name in LABEL_NAMES:
            print(f"  {name:<14}{result['scores'][name]:.6f}")
    return EXIT_OK


def _labeled(matrix, rows, cols):
    return {"rows": rows, "cols": cols, "values": np.asarray(matrix).tolist()}


def alignment_report(ckpt, premise, hypothesis):
    a, b, ids_a, ids_b = _encode_pair(ckpt, premise, hypothesis)
    _, trace = M.forward(ids_a, ids_b, ckpt.params, ckpt.config, ckpt.embeddings)
    att = trace.attend_cache
    return {
        "premise_tokens": a,
        "hypothesis_tokens": b,
        "scores": _labeled(trace.e, a, b),
        "premise_to_hypothesis": _labeled(att.w_b, a, b),
        "hypothesis_to_premise": _labeled(att.w_a, b, a),
    }


def cmd_attend_dump(opts):
    ckpt = load_model(opts)
    print(json.dumps(alignment_report(ckpt, opts.premise, opts.hypothesis), sort_keys=True))
    return EXIT_OK


def run_bench(params, config, table, length, worker_counts, n_pairs=20, repeats=3,
              mode="positions", seed=0):
    """Time eval-mode forward passes over random pairs at each worker count."""
    rng = np.random.default_rng(seed)
    pairs = [
        (np.r_[0, rng.integers(1, len(table), length - 1)],
         np.r_[0, rng.integers(1, len(table), length - 1)])
        for _ in range(n_pairs)
    ]

    def one(pair, pool=None, workers=1):
        logits, trace = M.forward(pair[0], pair[1], params, config, table, pool=pool,
                                  workers=workers)
        return logits[0], trace.counters

    reference = [one(p) for p in pairs]
    base_logits = np.array([r[0] for r in reference])
    counters = reference[0][1]
    rows = []
    base_time = None
    for w in worker_counts:
        best = float("inf")
        with ThreadPoolExecutor(max_workers=w) as pool:
            for _ in range(repeats):
                start = time.perf_counter()
                if w == 1:
                    out = [one(p) for p in pairs]
                elif mode == "positions":
                    out = [one(p, pool, w) for p in pairs]
                else:
                    out = list(pool.map(one, pairs))
                best = min(best, time.perf_counter() - start)
        logits = np.array([r[0] for r in out])
        if base_time is None:
            base_time = best
        rows.append({
            "workers": w,
            "seconds": best,
            "pairs_per_second": n_pairs / best,
            "speedup": base_time / best,
            "max_abs_logit_diff": float(np.abs(logits - base_logits).max()),
        })
    return {
        "mode": mode,
        "length": length,
        "dim": config.proj_dim,
        "hidden": config.hidden,
        "pairs": n_pairs,
        "f_applications": counters.f_applications,
        "flops_per_pair": counters.flops,
        "results": rows,
    }


def cmd_bench(opts):
    if opts.length < 1 or opts.dim < 1:
        raise UsageError("--length and --dim must be >= 1")
    try:
        worker_counts = [int(w) for w in opts.worker_counts.split(",")]
    except ValueError:
        raise UsageError(f"bad --worker-counts {opts.worker_counts!r}") from None
    if not worker_counts or min(worker_counts) < 1:
        raise UsageError("worker counts must be >= 1")
    if opts.checkpoint:
        ckpt = load_model(opts)
        params, config, table = ckpt.params, ckpt.config, ckpt.embeddings
    else:
        config = M.ModelConfig(proj_dim=opts.dim, hidden=opts.dim)
        params = M.init_params(config, seed=opts.seed)
        table = EmbeddingTable(random_rows(1000, config.embed_dim_in, opts.seed), seed=opts.seed)
    if worker_counts[0] != 1:
        worker_counts = [1] + worker_counts
    report = run_bench(params, config, table, opts.length, worker_counts, opts.pairs,
                       opts.repeats, opts.mode, opts.seed)
    report["cpu_count"] = os.cpu_count()
    if not opts.json:
        print(f"mode={report['mode']} length={report['length']} dim={report['dim']} "
              f"F applications/pair={report['f_applications']} flops/pair={report['flops_per_pair']}")
        print(f"{'workers':>8}{'seconds':>10}{'pairs/s':>10}{'speedup':>9}{'max|dlogit|':>13}")
        for r in report["results"]:
            print(f"{r['workers']:>8}{r['seconds']:>10.4f}{r['pairs_per_second']:>10.1f}"
                  f"{r['speedup']:>9.2f}{r['max_abs_logit_diff']:>13.2e}")
    for r in report["results"]:
        if r["workers"] >= 4 and r["speedup"] < 1.5:
            log.warning("speedup %.2f at %d workers is below 1.5 (cpu_count=%s)",
                        r["speedup"], r["workers"], report["cpu_count"])
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_synth(opts):
    os.makedirs(opts.output_dir, exist_ok=True)
    sizes = {"train": opts.pairs, "dev": max(1, opts.pairs // 10), "test": max(1, opts.pairs // 10)}
    for k, (name, n) in enumerate(sizes.items()):
        synthetic.write_corpus(os.path.join(opts.output_dir, f"{name}.jsonl"), n,
                               seed=opts.seed * 3 + k)
    synthetic.write_vectors(os.path.join(opts.output_dir, "vectors.txt"), dim=opts.dim,
                            seed=opts.seed)
    print(json.dumps({"output_dir": opts.output_dir, **sizes}, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    level = os.environ.get("DANLI_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        opts = resolve_options(ns)
        return ns.func(opts)
    except UsageError as exc:
        print(f"danli: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"danli: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"danli: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
