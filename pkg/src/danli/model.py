"""Decomposable attention network for sentence-pair classification.

Pipeline for one pair (premise a, hypothesis b), each already NULL-prefixed:

    embed -> project -> [intra_encode] -> attend -> compare -> aggregate

The forward pass records a :class:`ForwardTrace`; :func:`backward` walks it in
reverse to produce exact gradients for every trainable tensor. Embedding rows
are inputs, not parameters.

Parameters live in a plain ``dict`` of 2-D float arrays keyed by names such as
``"F.W0"`` or ``"out.b"``; see :func:`param_shapes` for the full layout.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .embeddings import embed_sentence
from .errors import NumericError, ShapeError

INIT_SCALE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    embed_dim_in: int = 300
    proj_dim: int = 200
    hidden: int = 200
    layers_per_net: int = 2
    classes: int = 3
    dropout_ratio: float = 0.2
    use_intra: bool = False
    distance_cap: int = 10

    def __post_init__(self):
        for name in ("embed_dim_in", "proj_dim", "hidden", "layers_per_net", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.distance_cap < 0:
            raise ValueError("distance_cap must be >= 0")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError("dropout_ratio must lie in [0, 1)")

    @property
    def rep_dim(self):
        """Width of the token representation fed to attend/compare."""
        return 2 * self.proj_dim if self.use_intra else self.proj_dim

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def _net_shapes(prefix, n_in, hidden, layers):
    shapes = {}
    for k in range(layers):
        shapes[f"{prefix}.W{k}"] = (n_in if k == 0 else hidden, hidden)
        shapes[f"{prefix}.b{k}"] = (1, hidden)
    return shapes


def param_shapes(config):
    """Ordered ``name -> (rows, cols)`` for every trainable tensor."""
    c = config
    shapes = {"projection": (c.embed_dim_in, c.proj_dim)}
    if c.use_intra:
        shapes.update(_net_shapes("F_intra", c.proj_dim, c.hidden, c.layers_per_net))
        shapes["dist_bias"] = (1, 2 * c.distance_cap + 1)
    shapes.update(_net_shapes("F", c.rep_dim, c.hidden, c.layers_per_net))
    shapes.update(_net_shapes("G", 2 * c.rep_dim, c.hidden, c.layers_per_net))
    shapes.update(_net_shapes("H", 2 * c.hidden, c.hidden, c.layers_per_net))
    shapes["out.W"] = (c.hidden, c.classes)
    shapes["out.b"] = (1, c.classes)
    return shapes


def init_params(config, seed=0, scale=INIT_SCALE):
    """Gaussian(0, scale) weights and biases; distance biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "dist_bias":
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def check_params(params, config):
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter set does not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape} != expected {shape}")


def count_params(params, config):
    check_params(params, config)
    return sum(int(p.size) for p in params.values())


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class Counters:
    f_applications: int = 0   # rows pushed through the attend network F
    flops: int = 0            # multiply-adds in matrix products


class _Seeds:
    """Deterministic stream of per-call dropout seeds ``(seed, k)``."""

    def __init__(self, seed):
        self.seed = seed
        self.used = []

    def next(self):
        s = (self.seed, len(self.used))
        self.used.append(s)
        return s


@dataclass
class _NetCache:
    prefix: str
    inputs: list = field(default_factory=list)   # post-dropout layer inputs
    pre: list = field(default_factory=list)      # pre-activations
    drop: list = field(default_factory=list)     # dropout scale matrices or None


def _chunks(x, workers):
    return np.array_split(x, min(workers, x.shape[0]), axis=0)


def net_forward(params, prefix, x, config, train, seeds, counters, pool=None, workers=1):
    """Stack of ``layers_per_net`` (dropout -> affine -> ReLU) layers."""
    if pool is not None and not train and x.shape[0] > 1:
        parts = [
            pool.submit(net_forward, params, prefix, part, config, False, None, Counters())
            for part in _chunks(x, workers)
        ]
        results = [f.result() for f in parts]
        out = np.concatenate([r[0] for r in results], axis=0)
        cache = _NetCache(prefix)
        for k in range(config.layers_per_net):
            cache.inputs.append(np.concatenate([r[1].inputs[k] for r in results], axis=0))
            cache.pre.append(np.concatenate([r[1].pre[k] for r in results], axis=0))
            cache.drop.append(None)
        for k in range(config.layers_per_net):
            W = params[f"{prefix}.W{k}"]
            counters.flops += x.shape[0] * W.shape[0] * W.shape[1]
        return out, cache

    cache = _NetCache(prefix)
    for k in range(config.layers_per_net):
        W, b = params[f"{prefix}.W{k}"], params[f"{prefix}.b{k}"]
        drop = None
        if train and config.dropout_ratio > 0.0:
            drop = nx.dropout_mask(x.shape, config.dropout_ratio, seeds.next())
            x = x * drop
        z = nx.affine(x, W, b)
        counters.flops += x.shape[0] * W.shape[0] * W.shape[1]
        cache.inputs.append(x)
        cache.pre.append(z)
        cache.drop.append(drop)
        x = nx.relu(z)
    return x, cache


def net_backward(dout, cache, params, grads):
    for k in reversed(range(len(cache.pre))):
        dz = nx.relu_backward(dout, cache.pre[k])
        dx, dW, db = nx.affine_backward(dz, cache.inputs[k], params[f"{cache.prefix}.W{k}"])
        grads[f"{cache.prefix}.W{k}"] += dW
        grads[f"{cache.prefix}.b{k}"] += db
        if cache.drop[k] is not None:
            dx = dx * cache.drop[k]
        dout = dx
    return dout


def preactivations(trace):
    """Every ReLU pre-activation matrix recorded in a trace."""
    return [z for cache in trace.net_caches() for z in cache.pre]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def project(embedded, P):
    if embedded.shape[1] != P.shape[0]:
        raise ShapeError(f"project: embedded {embedded.shape} vs projection {P.shape}")
    return embedded @ P


def distance_buckets(length, cap):
    """Index into the distance-bias vector for every (i, j): clamp(i-j) + cap."""
    pos = np.arange(length)
    return np.clip(pos[:, None] - pos[None, :], -cap, cap) + cap


@dataclass
class _IntraCache:
    x: np.ndarray
    fx: np.ndarray
    net: _NetCache
    buckets: np.ndarray
    weights: np.ndarray


def intra_encode(x, mask, params, config, train=False, seeds=None, counters=None,
                 pool=None, workers=1):
    """Self-attend over one sentence and return ``[x, context]`` per row."""
    counters = counters if counters is not None else Counters()
    seeds = seeds if seeds is not None else _Seeds(0)
    fx, net = net_forward(params, "F_intra", x, config, train, seeds, counters, pool, workers)
    buckets = distance_buckets(x.shape[0], config.distance_cap)
    logits = fx @ fx.T + params["dist_bias"][0][buckets]
    weights = nx.masked_softmax_rows(logits, mask)
    context = weights @ x
    n = x.shape[0]
    counters.flops += n * n * fx.shape[1] + n * n * x.shape[1]
    return nx.concat_cols(x, context), _IntraCache(x, fx, net, buckets, weights)


def intra_encode_backward(dout, cache, params, config, grads):
    x, w = cache.x, cache.weights
    dx, dcontext = nx.concat_cols_backward(dout, x.shape[1])
    dx = dx + w.T @ dcontext
    dlogits = nx.masked_softmax_rows_backward(dcontext @ x.T, w)
    grads["dist_bias"] += np.bincount(
        cache.buckets.ravel(), weights=dlogits.ravel(), minlength=2 * config.distance_cap + 1
    )[None, :]
    dfx = (dlogits + dlogits.T) @ cache.fx
    return dx + net_backward(dfx, cache.net, params, grads)


@dataclass
class _AttendCache:
    a: np.ndarray
    b: np.ndarray
    fa: np.ndarray
    fb: np.ndarray
    net_a: _NetCache
    net_b: _NetCache
    w_b: np.ndarray   # [la, lb] weights over hypothesis rows, per premise row
    w_a: np.ndarray   # [lb, la] weights over premise rows, per hypothesis row


def attend(a, b, mask_a, mask_b, params, config, train=False, seeds=None, counters=None,
           pool=None, workers=1):
    """Soft-align both sentences. Returns ``(e, beta, alpha, cache)``.

    F is applied once per row of ``a`` and of ``b``; the pairwise scores are a
    single product of the two transformed matrices.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"attend: column counts differ, {a.shape} vs {b.shape}")
    counters = counters if counters is not None else Counters()
    seeds = seeds if seeds is not None else _Seeds(0)
    fa, net_a = net_forward(params, "F", a, config, train, seeds, counters, pool, workers)
    fb, net_b = net_forward(params, "F", b, config, train, seeds, counters, pool, workers)
    counters.f_applications += a.shape[0] + b.shape[0]
    e = fa @ fb.T
    w_b = nx.masked_softmax_rows(e, mask_b)
    w_a = nx.masked_softmax_rows(e.T, mask_a)
    beta = w_b @ b
    alpha = w_a @ a
    la, lb = e.shape
    counters.flops += la * lb * fa.shape[1] + 2 * la * lb * a.shape[1]
    return e, beta, alpha, _AttendCache(a, b, fa, fb, net_a, net_b, w_b, w_a)


def attend_backward(dbeta, dalpha, cache, params, grads):
    """Return ``(da, db)``."""
    da = cache.w_a.T @ dalpha
    db = cache.w_b.T @ dbeta
    de = nx.masked_softmax_rows_backward(dbeta @ cache.b.T, cache.w_b)
    de = de + nx.masked_softmax_rows_backward(dalpha @ cache.a.T, cache.w_a).T
    da = da + net_backward(de @ cache.fb, cache.net_a, params, grads)
    db = db + net_backward(de.T @ cache.fa, cache.net_b, params, grads)
    return da, db


def compare(a, beta, b, alpha, params, config, train=False, seeds=None, counters=None,
            pool=None, workers=1):
    """Apply G to ``[a_i, beta_i]`` and ``[b_j, alpha_j]`` row by row."""
    if a.shape != beta.shape or b.shape != alpha.shape:
        raise ShapeError(
            f"compare: a {a.shape} / beta {beta.shape}, b {b.shape} / alpha {alpha.shape}"
        )
    counters = counters if counters is not None else Counters()
    seeds = seeds if seeds is not None else _Seeds(0)
    v1, c1 = net_forward(params, "G", nx.concat_cols(a, beta), config, train, seeds,
                         counters, pool, workers)
    v2, c2 = net_forward(params, "G", nx.concat_cols(b, alpha), config, train, seeds,
                         counters, pool, workers)
    return v1, v2, (c1, c2)


def compare_backward(dv1, dv2, caches, params, grads, width):
    """Return ``(da, dbeta, db, dalpha)``; ``width`` is the column count of a."""
    c1, c2 = caches
    da, dbeta = nx.concat_cols_backward(net_backward(dv1, c1, params, grads), width)
    db, dalpha = nx.concat_cols_backward(net_backward(dv2, c2, params, grads), width)
    return da, dbeta, db, dalpha


@dataclass
class _AggregateCache:
    mask_a: np.ndarray
    mask_b: np.ndarray
    summed: np.ndarray
    net: _NetCache
    h: np.ndarray


def aggregate(v1, v2, mask_a, mask_b, params, config, train=False, seeds=None,
              counters=None):
    """Sum each comparison set, then classify. Returns ``(logits, cache)``."""
    counters = counters if counters is not None else Counters()
    seeds = seeds if seeds is not None else _Seeds(0)
    summed = nx.concat_cols(nx.masked_row_sum(v1, mask_a), nx.masked_row_sum(v2, mask_b))
    h, net = net_forward(params, "H", summed, config, train, seeds, counters)
    logits = nx.affine(h, params["out.W"], params["out.b"])
    counters.flops += h.shape[1] * logits.shape[1]
    return logits, _AggregateCache(mask_a, mask_b, summed, net, h)


def aggregate_backward(dlogits, cache, params, grads, hidden):
    dh, dW, db = nx.affine_backward(dlogits, cache.h, params["out.W"])
    grads["out.W"] += dW
    grads["out.b"] += db
    dsummed = net_backward(dh, cache.net, params, grads)
    d1, d2 = nx.concat_cols_backward(dsummed, hidden)
    return nx.masked_row_sum_backward(d1, cache.mask_a), nx.masked_row_sum_backward(d2, cache.mask_b)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def loss(logits, label):
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.isfinite(logits).all():
        raise NumericError(f"non-finite logits {logits}")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range")
    return float(-log_softmax(logits)[label])


def loss_backward(logits, label):
    d = softmax(logits)
    d[..., label] -= 1.0
    return d


# ---------------------------------------------------------------------------
# full pass
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    config: ModelConfig
    train: bool
    seed: int
    embedded_a: np.ndarray     # full (possibly padded) embedded inputs
    embedded_b: np.ndarray
    len_a: int
    len_b: int
    projected_a: np.ndarray
    projected_b: np.ndarray
    intra_a: object
    intra_b: object
    rep_a: np.ndarray
    rep_b: np.ndarray
    e: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    attend_cache: _AttendCache
    v1: np.ndarray
    v2: np.ndarray
    compare_caches: tuple
    aggregate_cache: _AggregateCache
    logits: np.ndarray
    counters: Counters
    dropout_seeds: list

    def net_caches(self):
        caches = [self.attend_cache.net_a, self.attend_cache.net_b, *self.compare_caches,
                  self.aggregate_cache.net]
        if self.intra_a is not None:
            caches += [self.intra_a.net, self.intra_b.net]
        return caches


def forward_embedded(embedded_a, embedded_b, params, config, *, mask_a=None, mask_b=None,
                     train=False, seed=0, pool=None, workers=1):
    """Forward pass from embedded rows. Returns ``(logits [1 x C], trace)``.

    Padding rows (mask False) are dropped before any arithmetic, so they can
    affect neither the logits nor any gradient.
    """
    if pool is not None and train:
        raise ValueError("position-parallel evaluation is only available in eval mode")
    la = embedded_a.shape[0] if mask_a is None else nx.mask_length(mask_a)
    lb = embedded_b.shape[0] if mask_b is None else nx.mask_length(mask_b)
    if mask_a is not None and len(mask_a) != embedded_a.shape[0]:
        raise ShapeError("premise mask length does not match its embedded rows")
    if mask_b is not None and len(mask_b) != embedded_b.shape[0]:
        raise ShapeError("hypothesis mask length does not match its embedded rows")
    m_a = np.ones(la, dtype=bool)
    m_b = np.ones(lb, dtype=bool)
    seeds = _Seeds(seed)
    counters = Counters()
    par = dict(pool=pool, workers=workers)

    pa = project(embedded_a[:la], params["projection"])
    pb = project(embedded_b[:lb], params["projection"])
    counters.flops += (la + lb) * params["projection"].size
    intra_a = intra_b = None
    if config.use_intra:
        rep_a, intra_a = intra_encode(pa, m_a, params, config, train, seeds, counters, **par)
        rep_b, intra_b = intra_encode(pb, m_b, params, config, train, seeds, counters, **par)
    else:
        rep_a, rep_b = pa, pb
    e, beta, alpha, att = attend(rep_a, rep_b, m_a, m_b, params, config, train, seeds,
                                 counters, **par)
    v1, v2, cmp = compare(rep_a, beta, rep_b, alpha, params, config, train, seeds,
                          counters, **par)
    logits, agg = aggregate(v1, v2, m_a, m_b, params, config, train, seeds, counters)
    trace = ForwardTrace(
        config, train, seed, embedded_a, embedded_b, la, lb, pa, pb, intra_a, intra_b,
        rep_a, rep_b, e, beta, alpha, att, v1, v2, cmp, agg, logits, counters, seeds.used,
    )
    return logits, trace


def forward(premise_ids, hypothesis_ids, params, config, table, *, premise_mask=None,
            hypothesis_mask=None, train=False, seed=0, pool=None, workers=1):
    """Embed two id sequences and run :func:`forward_embedded`."""
    return forward_embedded(
        embed_sentence(premise_ids, table), embed_sentence(hypothesis_ids, table),
        params, config, mask_a=premise_mask, mask_b=hypothesis_mask,
        train=train, seed=seed, pool=pool, workers=workers,
    )


def backward(trace, label, params, scale=1.0, grads=None, input_grads=False):
    """Gradients of ``scale * loss`` for every parameter.

    ``grads`` may be an existing dict to accumulate into. With
    ``input_grads=True`` also returns adjoints of the (padded) embedded inputs.
    """
    config = trace.config
    if grads is None:
        grads = {name: np.zeros_like(p) for name, p in params.items()}
    dlogits = scale * loss_backward(trace.logits, label)
    dv1, dv2 = aggregate_backward(dlogits, trace.aggregate_cache, params, grads, config.hidden)
    da, dbeta, db, dalpha = compare_backward(dv1, dv2, trace.compare_caches, params, grads,
                                             config.rep_dim)
    da2, db2 = attend_backward(dbeta, dalpha, trace.attend_cache, params, grads)
    da, db = da + da2, db + db2
    if config.use_intra:
        da = intra_encode_backward(da, trace.intra_a, params, config, grads)
        db = intra_encode_backward(db, trace.intra_b, params, config, grads)
    P = params["projection"]
    ea, eb = trace.embedded_a[: trace.len_a], trace.embedded_b[: trace.len_b]
    grads["projection"] += ea.T @ da + eb.T @ db
    if not input_grads:
        return grads
    d_emb_a = np.zeros_like(trace.embedded_a)
    d_emb_b = np.zeros_like(trace.embedded_b)
    d_emb_a[: trace.len_a] = da @ P.T
    d_emb_b[: trace.len_b] = db @ P.T
    return grads, (d_emb_a, d_emb_b)


# ---------------------------------------------------------------------------
# batch helpers
# ---------------------------------------------------------------------------


def batch_loss_and_grads(batch, params, config, table, seed=0, train=True):
    """Mean loss over the batch and the gradient of that mean."""
    n = len(batch)
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    total = 0.0
    for r in range(n):
        logits, trace = forward(
            batch.premise_ids[r], batch.hypothesis_ids[r], params, config, table,
            premise_mask=batch.premise_mask[r], hypothesis_mask=batch.hypothesis_mask[r],
            train=train, seed=(seed * 1_000_003 + r) % (2**63),
        )
        label = int(batch.labels[r])
        total += loss(logits, label)
        backward(trace, label, params, scale=1.0 / n, grads=grads)
    return total / n, grads


def predict_logits(batch, params, config, table, pool=None, workers=1):
    """Eval-mode logits, shape ``[B, C]``."""
    rows = []
    for r in range(len(batch)):
        logits, _ = forward(
            batch.premise_ids[r], batch.hypothesis_ids[r], params, config, table,
            premise_mask=batch.premise_mask[r], hypothesis_mask=batch.hypothesis_mask[r],
            pool=pool, workers=workers,
        )
        rows.append(logits[0])
    return np.array(rows)


def predict(batch, params, config, table):
    """Predicted classes; equal logits resolve to the lowest class index."""
    return np.argmax(predict_logits(batch, params, config, table), axis=1)
