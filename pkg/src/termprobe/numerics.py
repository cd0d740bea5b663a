"""Dense kernels with hand-written backward passes.

Matrices are plain row-major ``numpy`` arrays (float32 for storage); every
reduction that feeds a normalisation is accumulated in float64. The batched
forms used by the retriever live in :mod:`termprobe.retriever`; the kernels
here are the 2-D building blocks and the references they are checked against.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(x, dtype=DTYPE) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=dtype)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a float64 accumulator, returned in ``a``'s dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False)


def matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dL/da, dL/db)`` given the upstream gradient ``g`` of ``a @ b``."""
    return matmul(g, b.T), matmul(a.T, g)


def masked_softmax_rows(scores: np.ndarray, mask) -> np.ndarray:
    """Row softmax restricted to the columns where ``mask`` is true.

    Masked columns come out as exact zeros. Rows are shifted by their max over
    valid columns before exponentiation.
    """
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim != 2:
        raise DimensionError(f"expected 2-D scores, got shape {scores.shape}")
    if mask.shape != (scores.shape[1],):
        raise DimensionError(
            f"mask length {mask.shape} does not match score columns {scores.shape[1]}"
        )
    if not mask.any():
        raise DegenerateMaskError("every column is masked")
    s = scores.astype(np.float64)
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(scores.dtype if scores.dtype.kind == "f" else DTYPE)


def softmax_backward(probs: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through a (masked) row softmax; masked columns receive zero."""
    p = probs.astype(np.float64)
    g = g.astype(np.float64)
    dot = (p * g).sum(axis=-1, keepdims=True)
    return (p * (g - dot)).astype(probs.dtype)


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    """Inverted-dropout multiplier: zeros with probability ``p``, else ``1/(1-p)``."""
    if p <= 0.0:
        return np.ones(shape, dtype=dtype)
    dt = np.dtype(dtype)
    draw = rng.random(shape, dtype=np.float32) if dt == np.float32 else rng.random(shape)
    out = (draw >= p).astype(dt)
    out *= dt.type(1.0 / (1.0 - p))
    return out


def finite_diff_check(loss_fn, params: dict, analytic: dict, eps: float = 1e-4,
                      floor: float = 1e-6) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must read the arrays in ``params`` (mutated in place here).
    The error of each tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over the tensor, so entries whose gradient is tiny relative to the
    rest of the tensor do not dominate. The denominator never drops below
    ``floor``: gradients that vanish identically (a key bias under softmax
    shift invariance) are compared in absolute terms. Returns the max over
    tensors.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-5, 1e-3], got {eps}")
    worst = 0.0
    for name, p in params.items():
        num = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num.reshape(-1)[i] = (up - down) / (2.0 * eps)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(num.shape)
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
