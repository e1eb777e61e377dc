"""Dense-matrix primitives with paired backward functions.

Every activation, parameter and gradient is a 2-D numpy array. Each forward
op ``foo`` has a ``foo_backward`` that maps the upstream adjoint to adjoints
of the inputs (a vector-Jacobian product). Nothing here mutates its inputs.

Masks are 1-D boolean arrays with ``True`` marking real tokens. A valid mask
has at least one ``True`` and its ``False`` entries form a suffix.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MaskError, NumericError, ShapeError

DTYPE = np.float64


def as_matrix(values, dtype=DTYPE):
    """Coerce nested sequences / arrays to a 2-D array of ``dtype``."""
    m = np.asarray(values, dtype=dtype)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_mask(mask, length=None):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1:
        raise MaskError(f"mask must be 1-D, got shape {mask.shape}")
    if length is not None and mask.shape[0] != length:
        raise MaskError(f"mask length {mask.shape[0]} != {length}")
    n = int(mask.sum())
    if n == 0:
        raise MaskError("mask has no real positions; cannot normalize over empty support")
    if not mask[:n].all():
        raise MaskError("padding must be a suffix of the mask")
    return mask


def mask_length(mask):
    """Number of real positions in a valid mask."""
    return int(check_mask(mask).sum())


@dataclass(frozen=True)
class AdjointPair:
    """A value together with the adjoint (gradient) accumulated for it."""

    value: np.ndarray
    adjoint: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.adjoint.shape:
            raise ShapeError(
                f"value shape {self.value.shape} != adjoint shape {self.adjoint.shape}"
            )

    @classmethod
    def zeros_like(cls, value):
        return cls(value, np.zeros_like(value))


# ---------------------------------------------------------------------------
# affine / relu
# ---------------------------------------------------------------------------


def affine(x, W, b):
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise ShapeError(
            f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not compose"
        )
    return x @ W + b


def affine_backward(dout, x, W):
    """Return ``(dx, dW, db)``."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    # The subgradient at exactly 0 is taken as 0.
    return np.where(x > 0.0, dout, 0.0)


# ---------------------------------------------------------------------------
# masked softmax / sums
# ---------------------------------------------------------------------------


def masked_softmax_rows(e, mask):
    """Row-wise softmax over the columns selected by ``mask``.

    Masked columns come out as exact zeros.
    """
    mask = check_mask(mask, e.shape[1])
    out = np.zeros_like(e)
    sub = e[:, mask]
    sub = np.exp(sub - sub.max(axis=1, keepdims=True))
    out[:, mask] = sub / sub.sum(axis=1, keepdims=True)
    return out


def masked_softmax_rows_backward(dout, s):
    """Backward of the row softmax given its output ``s``.

    Masked columns have ``s == 0`` and therefore receive exactly 0.
    """
    return s * (dout - (dout * s).sum(axis=1, keepdims=True))


def masked_row_sum(v, mask):
    mask = check_mask(mask, v.shape[0])
    return v[mask].sum(axis=0, keepdims=True)


def masked_row_sum_backward(dout, mask):
    mask = check_mask(mask)
    dv = np.zeros((mask.shape[0], dout.shape[1]), dtype=dout.dtype)
    dv[mask] = dout
    return dv


# ---------------------------------------------------------------------------
# concatenation
# ---------------------------------------------------------------------------


def concat_cols(x, y):
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {x.shape} vs {y.shape}")
    return np.concatenate([x, y], axis=1)


def concat_cols_backward(dout, p):
    """Split the adjoint of a concatenation after the first ``p`` columns."""
    return dout[:, :p], dout[:, p:]


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout_mask(shape, ratio, rng_seed):
    """Inverted-dropout scale matrix: 0 for dropped cells, 1/(1-ratio) otherwise.

    ``rng_seed`` may be an int or a sequence of ints; the same seed always
    yields the same mask.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= ratio
    return keep * (1.0 / (1.0 - ratio))


def dropout(x, ratio, rng_seed, train_mode):
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if not train_mode or ratio == 0.0:
        return x
    return x * dropout_mask(x.shape, ratio, rng_seed)


def dropout_backward(dout, ratio, rng_seed, train_mode):
    if not train_mode or ratio == 0.0:
        return dout
    return dout * dropout_mask(dout.shape, ratio, rng_seed)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, eps=1e-5):
    """Compare analytic gradients with central differences.

    ``f(params)`` must return ``(value, grads)`` where ``grads`` maps every
    key of ``params`` to an array of the same shape. Returns the maximum over
    all coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    value, grads = f(params)
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    worst = 0.0
    for name, p in params.items():
        analytic = np.asarray(grads[name], dtype=DTYPE)
        if analytic.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {analytic.shape}, expected {p.shape}")
        for idx in np.ndindex(p.shape):
            probe = dict(params)
            shifted = p.copy()
            shifted[idx] = p[idx] + eps
            probe[name] = shifted
            up, _ = f(probe)
            shifted = p.copy()
            shifted[idx] = p[idx] - eps
            probe[name] = shifted
            down, _ = f(probe)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite value while perturbing {name}{list(idx)}")
            numeric = (up - down) / (2.0 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
