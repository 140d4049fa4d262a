"""Toy diffusion transformer predicting the flow-matching velocity.

Each block runs self-attention, text cross-attention, ID injection and a
feed-forward layer, all pre-normalized (RMS norm with a learned gain) and
residual.  Forward passes return a cache; :func:`backward` turns an upstream
gradient on the velocity into gradients for every named parameter and for
the noisy input ``x_t``.

Parameters live in a flat name -> array map so checkpoints, the optimizer
and the gradient checker can all walk the same names.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import id_attention as ida
from .errors import ConfigurationError, DimensionError, DomainError
from .numerics import as_tensor

BLOCK_STAGES = ("self", "text", "id", "ffn")
NORM_EPS = 1e-6
_GELU_K = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ToyDiTConfig:
    token_count: int = 16
    dim: int = 32
    id_token_count: int = 4
    id_dim: int = 16
    cond_dim: int = 8
    heads: int = 4
    blocks: int = 2
    time_embed_dim: int = 8
    time_grid: int = 20
    ffn_mult: int = 2
    id_blocks: tuple = None
    block_order: tuple = BLOCK_STAGES

    def __post_init__(self):
        for name in ("token_count", "dim", "id_token_count", "id_dim", "cond_dim", "heads",
                     "blocks", "time_embed_dim", "time_grid", "ffn_mult"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        ids = tuple(range(self.blocks)) if self.id_blocks is None else tuple(self.id_blocks)
        if any(not 0 <= i < self.blocks for i in ids):
            raise ConfigurationError(f"id_blocks {ids} outside 0..{self.blocks - 1}")
        object.__setattr__(self, "id_blocks", ids)
        order = tuple(self.block_order)
        if sorted(order) != sorted(BLOCK_STAGES):
            raise ConfigurationError(f"block_order must be a permutation of {BLOCK_STAGES}")
        object.__setattr__(self, "block_order", order)

    def to_dict(self):
        d = asdict(self)
        d["id_blocks"] = list(self.id_blocks)
        d["block_order"] = list(self.block_order)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def is_id_attn(name):
    return ".id_attn." in name


@dataclass
class ModelParams:
    config: ToyDiTConfig
    tensors: dict
    freeze_mask: dict = field(default=None)

    def __post_init__(self):
        if self.freeze_mask is None:
            self.freeze_mask = {n: not is_id_attn(n) for n in self.tensors}
        if set(self.freeze_mask) != set(self.tensors):
            raise ConfigurationError("freeze_mask must cover every parameter exactly once")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def trainable(self):
        return [n for n in self.tensors if not self.freeze_mask[n]]

    @property
    def frozen(self):
        return [n for n in self.tensors if self.freeze_mask[n]]

    def replace(self, updates=None, freeze_mask=None):
        """New params with some tensors swapped; the input is never mutated."""
        tensors = dict(self.tensors)
        tensors.update(updates or {})
        mask = dict(self.freeze_mask if freeze_mask is None else freeze_mask)
        return ModelParams(self.config, tensors, mask)

    def id_attn(self, block):
        return ida.AttentionWeights.from_tensors(
            self.tensors, self.config.heads, prefix=f"block{block}.id_attn."
        )


def _param_shapes(cfg):
    d, dc, f = cfg.dim, cfg.cond_dim, cfg.dim * cfg.ffn_mult
    shapes = {
        "pos_embed": (cfg.token_count, d),
        "time_embed.table": (cfg.time_grid + 1, cfg.time_embed_dim),
        "time_embed.proj": (cfg.time_embed_dim, d),
    }
    for i in range(cfg.blocks):
        p = f"block{i}."
        for stage, ctx in (("self", d), ("text", dc)):
            shapes.update({
                p + stage + ".norm": (d,),
                p + stage + ".w_q": (d, d),
                p + stage + ".w_k": (ctx, d),
                p + stage + ".w_v": (ctx, d),
                p + stage + ".w_proj": (d, d),
            })
        if i in cfg.id_blocks:
            shapes.update({
                p + "id_norm": (d,),
                p + "id_attn.w_q": (cfg.id_dim, d),
                p + "id_attn.w_k": (d, d),
                p + "id_attn.w_v": (d, d),
                p + "id_attn.w_qnoise": (d, d),
                p + "id_attn.w_out": (d, d),
            })
        shapes.update({
            p + "ffn.norm": (d,),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (d,),
        })
    shapes.update({"head.norm": (d,), "head.w": (d, d), "head.b": (d,)})
    return shapes


def init_params(config, seed):
    """Scaled-normal init (std 1/sqrt(fan_in)); ID output projections start at zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("norm", "id_norm"):
            tensors[name] = np.ones(shape)
        elif leaf in ("b1", "b2", "b"):
            tensors[name] = np.zeros(shape)
        elif name.endswith("id_attn.w_out"):
            tensors[name] = np.zeros(shape)
        elif name == "time_embed.table":
            tensors[name] = rng.standard_normal(shape)
        elif name == "pos_embed":
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[1])
        else:
            tensors[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return ModelParams(config, tensors)


# -- layer kernels -----------------------------------------------------------

def _rms_forward(x, gain):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * r
    return xhat * gain, (xhat, r, gain)


def _rms_backward(dy, cache):
    xhat, r, gain = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    dx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain


def _gelu(x):
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)
    dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return y, dy


def _time_embedding(t, tensors, cfg):
    t = np.atleast_1d(as_tensor(t))
    if not np.all((t >= 0.0) & (t <= 1.0)):
        raise DomainError(f"flow time must lie in [0, 1], got {t}")
    pos = t * cfg.time_grid
    i0 = np.minimum(np.floor(pos).astype(int), cfg.time_grid - 1)
    frac = (pos - i0)[:, None]
    table = tensors["time_embed.table"]
    emb = (1.0 - frac) * table[i0] + frac * table[i0 + 1]
    return emb @ tensors["time_embed.proj"], (i0, frac, emb)


def _check_inputs(cfg, x_t, c, id_tokens):
    if x_t.shape[-2:] != (cfg.token_count, cfg.dim):
        raise DimensionError(f"x_t shape {x_t.shape} does not match ({cfg.token_count}, {cfg.dim})")
    if c.shape[-1] != cfg.cond_dim:
        raise DimensionError(f"condition shape {c.shape} does not match cond_dim {cfg.cond_dim}")
    if id_tokens.shape[-2:] != (cfg.id_token_count, cfg.id_dim):
        raise DimensionError(
            f"id_tokens shape {id_tokens.shape} does not match "
            f"({cfg.id_token_count}, {cfg.id_dim})"
        )


def forward(params, x_t, t, c, id_tokens, alpha, noise_tokens=None):
    """Velocity prediction plus the cache needed by :func:`backward`.

    Inputs may carry one leading batch axis; ``t`` and ``alpha`` are then
    scalars or length-B arrays.  ``noise_tokens`` feeds the noise-query path
    of the ID injection and defaults to ``x_t``.
    """
    cfg = params.config
    P = params.tensors
    x_t, c, id_tokens = as_tensor(x_t), as_tensor(c), as_tensor(id_tokens)
    _check_inputs(cfg, x_t, c, id_tokens)
    batched = x_t.ndim == 3
    if not batched:
        x_t = x_t[None]
    if c.ndim == 2:
        c = c[None]
    if id_tokens.ndim == 2:
        id_tokens = id_tokens[None]
    nt_given = noise_tokens is not None
    nt = x_t if not nt_given else as_tensor(noise_tokens).reshape(x_t.shape)
    B = x_t.shape[0]
    t_arr = np.broadcast_to(as_tensor(t), (B,)) if np.ndim(t) else np.full(B, float(t))
    alpha_arr = np.broadcast_to(as_tensor(alpha), (B,)) if np.ndim(alpha) else float(alpha)
    c = np.broadcast_to(c, (B,) + c.shape[1:])
    id_tokens = np.broadcast_to(id_tokens, (B,) + id_tokens.shape[1:])

    te, te_cache = _time_embedding(t_arr, P, cfg)
    h = x_t + P["pos_embed"] + te[:, None, :]
    caches = []
    for i in range(cfg.blocks):
        p = f"block{i}."
        bc = []
        for stage in cfg.block_order:
            if stage in ("self", "text"):
                n, nc = _rms_forward(h, P[p + stage + ".norm"])
                ctx = n if stage == "self" else c
                y, ac = ida.multi_head_attention_forward(
                    n, ctx, P[p + stage + ".w_q"], P[p + stage + ".w_k"],
                    P[p + stage + ".w_v"], P[p + stage + ".w_proj"], cfg.heads,
                )
                h = h + y
                bc.append((stage, nc, ac))
            elif stage == "id":
                if i not in cfg.id_blocks:
                    continue
                n, nc = _rms_forward(h, P[p + "id_norm"])
                w = params.id_attn(i)
                out, pc = ida.perceiver_forward(id_tokens, n, nt, w, alpha_arr)
                h = h + (out - n)
                bc.append((stage, nc, pc))
            else:
                n, nc = _rms_forward(h, P[p + "ffn.norm"])
                pre = n @ P[p + "ffn.w1"] + P[p + "ffn.b1"]
                act, dact = _gelu(pre)
                h = h + act @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
                bc.append((stage, nc, (n, act, dact)))
        caches.append(bc)
    nf, fc = _rms_forward(h, P["head.norm"])
    v = nf @ P["head.w"] + P["head.b"]
    cache = dict(batched=batched, nt_given=nt_given, te=te_cache, blocks=caches, head=(nf, fc),
                 c=c, id_tokens=id_tokens)
    return (v if batched else v[0]), cache


def predict_velocity(params, x_t, t, c, id_tokens, alpha, noise_tokens=None):
    return forward(params, x_t, t, c, id_tokens, alpha, noise_tokens)[0]


@dataclass
class Gradients:
    """Named parameter gradients plus input gradients.

    ``frozen`` lists the names whose entries exist but must not be applied.
    """

    params: dict
    x_t: np.ndarray
    c: np.ndarray
    id_tokens: np.ndarray
    frozen: frozenset


def backward(params, cache, dv):
    cfg = params.config
    P = params.tensors
    dv = as_tensor(dv)
    if not cache["batched"]:
        dv = dv[None]
    g = {name: np.zeros_like(arr) for name, arr in P.items()}
    dc = np.zeros(cache["c"].shape)
    did = np.zeros(cache["id_tokens"].shape)
    dnt = np.zeros(dv.shape)

    nf, fc = cache["head"]
    g["head.b"] = dv.reshape(-1, dv.shape[-1]).sum(axis=0)
    g["head.w"] = ida._wgrad(nf, dv)
    dh, g["head.norm"] = _rms_backward(dv @ P["head.w"].T, fc)

    for i in reversed(range(cfg.blocks)):
        p = f"block{i}."
        for stage, nc, lc in reversed(cache["blocks"][i]):
            if stage in ("self", "text"):
                ag, dn, dctx = ida.multi_head_attention_backward(dh, lc)
                for k, val in ag.items():
                    g[p + stage + "." + k] = val
                if stage == "self":
                    dn = dn + dctx
                else:
                    dc += dctx
                dx, g[p + stage + ".norm"] = _rms_backward(dn, nc)
                dh = dh + dx
            elif stage == "id":
                pg, dx_id, dx_gen, dx_tok = ida.perceiver_backward(dh, lc)
                for k, val in pg.items():
                    g[p + "id_attn." + k] = val
                did += dx_id
                dnt += dx_tok
                dx, g[p + "id_norm"] = _rms_backward(dx_gen - dh, nc)
                dh = dh + dx
            else:
                n, act, dact = lc
                g[p + "ffn.b2"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
                g[p + "ffn.w2"] = ida._wgrad(act, dh)
                dpre = (dh @ P[p + "ffn.w2"].T) * dact
                g[p + "ffn.b1"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
                g[p + "ffn.w1"] = ida._wgrad(n, dpre)
                dx, g[p + "ffn.norm"] = _rms_backward(dpre @ P[p + "ffn.w1"].T, nc)
                dh = dh + dx

    g["pos_embed"] = dh.sum(axis=0)
    dte = dh.sum(axis=1)
    i0, frac, emb = cache["te"]
    g["time_embed.proj"] = emb.T @ dte
    demb = dte @ P["time_embed.proj"].T
    table_grad = np.zeros_like(P["time_embed.table"])
    np.add.at(table_grad, i0, (1.0 - frac) * demb)
    np.add.at(table_grad, i0 + 1, frac * demb)
    g["time_embed.table"] = table_grad

    dx_t = dh if cache["nt_given"] else dh + dnt
    if not cache["batched"]:
        dx_t, dc, did = dx_t[0], dc[0], did[0]
    frozen = frozenset(n for n, f in params.freeze_mask.items() if f)
    return Gradients(params=g, x_t=dx_t, c=dc, id_tokens=did, frozen=frozen)


class VelocityModel:
    """Callable view of :class:`ModelParams` used by losses and the sampler.

    The ID strength fed to every injection block is derived from flow time:
    denoising progress is ``1 - t`` so ``alpha = alpha0 * t``, which equals
    ``alpha0 * (1 - k / T)`` at step ``k`` of a ``T``-step sampler.
    """

    def __init__(self, params, alpha0=0.8):
        self.params = params
        self.alpha0 = float(alpha0)

    def alpha(self, t):
        return self.alpha0 * np.clip(as_tensor(t), 0.0, 1.0)

    def __call__(self, x_t, t, c, id_tokens, noise_tokens=None):
        return forward(self.params, x_t, t, c, id_tokens, self.alpha(t), noise_tokens)[0]

    def vjp_x(self, x_t, t, c, id_tokens, upstream, noise_tokens=None):
        """Gradient of ``sum(velocity * upstream)`` with respect to ``x_t``."""
        _, cache = forward(self.params, x_t, t, c, id_tokens, self.alpha(t), noise_tokens)
        return backward(self.params, cache, upstream).x_t
