"""Decomposed Perceiver-style cross-attention for identity injection.

The ID tokens supply queries and the generation stream supplies keys and
values, each through its own projection.  The resulting per-ID-token
summaries are then read back by the generation tokens and added residually
through ``w_out``, so a zero ``w_out`` leaves the stream untouched.

All kernels accept leading batch axes; ``alpha`` may be a scalar or an
array holding one value per batch element.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, DimensionError, FusionError
from .numerics import as_tensor, matmul, softmax_rows, softmax_rows_backward

WEIGHT_FIELDS = ("w_q", "w_k", "w_v", "w_qnoise", "w_out")


def split_heads(x, heads):
    """(..., n, d) -> (..., heads, n, d // heads)."""
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -3, -2)


def merge_heads(x):
    """(..., heads, n, dh) -> (..., n, heads * dh)."""
    *lead, h, n, dh = x.shape
    return np.swapaxes(x, -3, -2).reshape(*lead, n, h * dh)


def _wgrad(x, dy):
    """Sum of x^T dy over all leading axes (gradient of a shared weight)."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _alpha_array(alpha):
    a = as_tensor(alpha)
    if a.ndim == 0:
        return a
    return a[..., None, None]


def _check_heads(d, heads):
    if heads <= 0 or d % heads:
        raise ConfigurationError(f"head_count {heads} does not divide width {d}")


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """The trainable ID-integration unit.

    Shapes: ``w_q`` (d_id, d), ``w_k``/``w_v``/``w_qnoise`` (d_gen, d),
    ``w_out`` (d, d_gen).  The summary read-back re-applies ``w_k``/``w_v``
    to the summaries, which requires ``d == d_gen``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_qnoise: np.ndarray
    w_out: np.ndarray
    head_count: int

    def __post_init__(self):
        for name in WEIGHT_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.ndim != 2:
                raise DimensionError(f"{name} must be a matrix, got shape {arr.shape}")
        d = self.w_q.shape[1]
        d_gen = self.w_k.shape[0]
        for name in ("w_k", "w_v", "w_qnoise"):
            if getattr(self, name).shape != (d_gen, d):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected {(d_gen, d)}"
                )
        if self.w_out.shape != (d, d_gen):
            raise DimensionError(f"w_out has shape {self.w_out.shape}, expected {(d, d_gen)}")
        if d != d_gen:
            raise DimensionError(f"attention width {d} must equal generation width {d_gen}")
        _check_heads(d, self.head_count)

    @property
    def width(self):
        return self.w_q.shape[1]

    def tensors(self, prefix="id_attn."):
        return {prefix + name: getattr(self, name) for name in WEIGHT_FIELDS}

    @classmethod
    def from_tensors(cls, tensors, head_count, prefix="id_attn."):
        return cls(head_count=head_count, **{n: tensors[prefix + n] for n in WEIGHT_FIELDS})

    def replace(self, **changes):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return AttentionWeights(**kw)

    def __eq__(self, other):
        if not isinstance(other, AttentionWeights):
            return NotImplemented
        return self.head_count == other.head_count and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in WEIGHT_FIELDS
        )

    __hash__ = None


@dataclass(frozen=True)
class FusionSpec:
    coefficients: tuple
    variant_ids: tuple

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        ids = tuple(self.variant_ids)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "variant_ids", ids)
        if len(coeffs) != len(ids) or not coeffs:
            raise FusionError("coefficients and variant_ids must be non-empty and equal length")
        if any(c < 0 for c in coeffs):
            raise FusionError(f"fusion coefficients must be non-negative: {coeffs}")
        if abs(math.fsum(coeffs) - 1.0) > 1e-12:
            raise FusionError(f"fusion coefficients must sum to 1, got {math.fsum(coeffs)!r}")


def decompose_qkv(x_id, x_gen, w):
    """Independent query/key/value paths: Q from ID tokens, K and V from the stream."""
    q = matmul(x_id, w.w_q)
    k = matmul(x_gen, w.w_k)
    v = matmul(x_gen, w.w_v)
    return q, k, v


def noise_query(x_t_tokens, w, n_id):
    """Token-mean pooled projection of the noisy latent, repeated for n_id rows."""
    pooled = matmul(x_t_tokens, w.w_qnoise).mean(axis=-2, keepdims=True)
    return np.broadcast_to(pooled, pooled.shape[:-2] + (n_id, pooled.shape[-1]))


def compensate_query(q, x_t_tokens, w, alpha):
    a = as_tensor(alpha)
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    q = as_tensor(q)
    qn = noise_query(x_t_tokens, w, q.shape[-2])
    a = _alpha_array(a)
    return a * q + (1.0 - a) * qn


def _attend(q, k, v, heads):
    """Scaled dot-product attention on already-projected (..., n, d) inputs."""
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    p = softmax_rows(np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale)
    return merge_heads(np.matmul(p, vh)), (qh, kh, vh, p, scale)


def _attend_backward(dout, cache):
    qh, kh, vh, p, scale = cache
    heads = qh.shape[-3]
    doh = split_heads(dout, heads)
    dp = np.matmul(doh, np.swapaxes(vh, -1, -2))
    dvh = np.matmul(np.swapaxes(p, -1, -2), doh)
    ds = softmax_rows_backward(p, dp) * scale
    dqh = np.matmul(ds, kh)
    dkh = np.matmul(np.swapaxes(ds, -1, -2), qh)
    return merge_heads(dqh), merge_heads(dkh), merge_heads(dvh)


def perceiver_forward(x_id, x_gen, x_t_tokens, w, alpha):
    """Forward pass; returns ``(out, cache)`` for :func:`perceiver_backward`."""
    x_id, x_gen, x_t_tokens = as_tensor(x_id), as_tensor(x_gen), as_tensor(x_t_tokens)
    if x_id.shape[-1] != w.w_q.shape[0]:
        raise DimensionError(f"ID tokens {x_id.shape} do not match w_q {w.w_q.shape}")
    if x_gen.shape[-1] != w.w_k.shape[0] or x_t_tokens.shape[-1] != w.w_qnoise.shape[0]:
        raise DimensionError(
            f"stream {x_gen.shape} / noisy tokens {x_t_tokens.shape} do not match width "
            f"{w.w_k.shape[0]}"
        )
    heads = w.head_count
    q, k, v = decompose_qkv(x_id, x_gen, w)
    q_prime = compensate_query(q, x_t_tokens, w, alpha)
    summary, c1 = _attend(q_prime, k, v, heads)
    k2 = summary @ w.w_k
    v2 = summary @ w.w_v
    q2 = x_gen @ w.w_qnoise
    read, c2 = _attend(q2, k2, v2, heads)
    out = x_gen + read @ w.w_out
    cache = (x_id, x_gen, x_t_tokens, w, _alpha_array(alpha), q, summary, read, c1, c2)
    return out, cache


def perceiver_attend(x_id, x_gen, x_t_tokens, w, alpha):
    return perceiver_forward(x_id, x_gen, x_t_tokens, w, alpha)[0]


def stage1_attention(x_id, x_gen, x_t_tokens, w, alpha):
    """Per-head attention of ID queries over stream tokens, shape (..., H, n_id, n_gen)."""
    return perceiver_forward(x_id, x_gen, x_t_tokens, w, alpha)[1][8][3]


def perceiver_backward(dout, cache):
    """Returns ``(grads, dx_id, dx_gen, dx_t_tokens)``; grads keyed by field name."""
    x_id, x_gen, x_t_tokens, w, a, q, summary, read, c1, c2 = cache
    n_tok = x_t_tokens.shape[-2]
    g = {}
    dx_gen = dout.copy()
    g["w_out"] = _wgrad(read, dout)
    dread = dout @ w.w_out.T
    dq2, dk2, dv2 = _attend_backward(dread, c2)
    g["w_qnoise"] = _wgrad(x_gen, dq2)
    dx_gen += dq2 @ w.w_qnoise.T
    g["w_k"] = _wgrad(summary, dk2)
    g["w_v"] = _wgrad(summary, dv2)
    dsummary = dk2 @ w.w_k.T + dv2 @ w.w_v.T
    dq_prime, dk, dv = _attend_backward(dsummary, c1)
    g["w_k"] += _wgrad(x_gen, dk)
    g["w_v"] += _wgrad(x_gen, dv)
    dx_gen += dk @ w.w_k.T + dv @ w.w_v.T
    dq = a * dq_prime
    dpooled = ((1.0 - a) * dq_prime).sum(axis=-2, keepdims=True) / n_tok
    dproj = np.broadcast_to(dpooled, dpooled.shape[:-2] + (n_tok, dpooled.shape[-1]))
    g["w_qnoise"] += _wgrad(x_t_tokens, dproj)
    dx_t = dproj @ w.w_qnoise.T
    g["w_q"] = _wgrad(x_id, dq)
    dx_id = dq @ w.w_q.T
    return g, dx_id, dx_gen, dx_t


def multi_head_attention_forward(x, ctx, w_q, w_k, w_v, w_proj, heads):
    x, ctx = as_tensor(x), as_tensor(ctx)
    _check_heads(w_q.shape[1], heads)
    q = matmul(x, w_q)
    k = matmul(ctx, w_k)
    v = matmul(ctx, w_v)
    o, c = _attend(q, k, v, heads)
    y = matmul(o, w_proj)
    return y, (x, ctx, w_q, w_k, w_v, w_proj, o, c)


def multi_head_attention(x, ctx, w_q, w_k, w_v, w_proj, heads):
    """Scaled dot-product multi-head attention of ``x`` over ``ctx`` plus projection."""
    return multi_head_attention_forward(x, ctx, w_q, w_k, w_v, w_proj, heads)[0]


def multi_head_attention_backward(dy, cache):
    """Returns ``(grads, dx, dctx)`` with grads keyed w_q, w_k, w_v, w_proj."""
    x, ctx, w_q, w_k, w_v, w_proj, o, c = cache
    g = {"w_proj": _wgrad(o, dy)}
    do = dy @ w_proj.T
    dq, dk, dv = _attend_backward(do, c)
    g["w_q"] = _wgrad(x, dq)
    g["w_k"] = _wgrad(ctx, dk)
    g["w_v"] = _wgrad(ctx, dv)
    dx = dq @ w_q.T
    dctx = dk @ w_k.T + dv @ w_v.T
    return g, dx, dctx


def fuse_weights(variants, spec):
    """Element-wise weighted sum of attention weight sets."""
    if len(variants) != len(spec.coefficients):
        raise FusionError(
            f"{len(variants)} variants but {len(spec.coefficients)} coefficients"
        )
    first = variants[0]
    for i, v in enumerate(variants[1:], start=1):
        if v.head_count != first.head_count:
            raise FusionError(f"variant {i} has {v.head_count} heads, expected {first.head_count}")
        for name in WEIGHT_FIELDS:
            if getattr(v, name).shape != getattr(first, name).shape:
                raise FusionError(
                    f"variant {i} field {name} has shape {getattr(v, name).shape}, "
                    f"expected {getattr(first, name).shape}"
                )
    fused = {}
    for name in WEIGHT_FIELDS:
        acc = spec.coefficients[0] * getattr(first, name)
        for coef, v in zip(spec.coefficients[1:], variants[1:]):
            acc = acc + coef * getattr(v, name)
        fused[name] = acc
    return AttentionWeights(head_count=first.head_count, **fused)
