"""Small float64 kernels and a central-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every
kernel accepts optional leading batch axes so the same code serves a single
sample ``(n, d)`` and a batch ``(B, n, d)``.
"""

import math

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EvaluationError

DTYPE = np.float64


def as_tensor(x):
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b):
    """Matrix product over the last two axes, with an explicit shape check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def softmax_rows(a):
    """Row-wise softmax over the last axis (max-subtracted)."""
    a = as_tensor(a)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p, dp):
    """Vector-Jacobian product of ``softmax_rows`` given its output ``p``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def cosine(u, v):
    u = as_tensor(u).ravel()
    v = as_tensor(v).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"cosine: shapes {u.shape} and {v.shape} differ")
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    if uu == 0.0 or vv == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    denom = math.sqrt(uu * vv)
    if not math.isfinite(denom) or denom == 0.0:
        denom = math.sqrt(uu) * math.sqrt(vv)
    # sqrt(uu * uu) == uu exactly, so cosine(u, +-u) is exactly +-1
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))


def cosine_and_grad(u, v):
    """Cosine similarity of ``u`` against a fixed ``v`` and its gradient in ``u``.

    Works on the last axis, so ``u`` may carry batch axes; ``v`` broadcasts.
    The returned cosine is not clamped (the gradient needs the raw value).
    """
    u = as_tensor(u)
    v = as_tensor(v)
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    uh = u / nu
    vh = v / nv
    cos = (uh * vh).sum(axis=-1, keepdims=True)
    grad = (vh - cos * uh) / nu
    return cos[..., 0], grad


def normalize(x, axis=-1):
    x = as_tensor(x)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    return x / n


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), the norm used by every gradient check."""
    a = as_tensor(a)
    b = as_tensor(b)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
