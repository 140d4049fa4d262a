"""Forward process, flow-matching and identity losses, ID guidance, Euler sampler.

Conventions: flow time ``t = 0`` is data and ``t = 1`` is noise; the
training path is ``x_t = (1 - t) x0 + t x1`` with target velocity
``x1 - x0``.  Sampling integrates from t = 1 down to t = 0.

A *model* here is any callable ``model(x_t, t, c, id_tokens, noise_tokens=None)``
returning a velocity; ID guidance additionally needs
``model.vjp_x(x_t, t, c, id_tokens, upstream, noise_tokens=None)``.
An *ID encoder* provides ``encoder(x)`` and ``encoder.cosine_and_grad(x, e_ref)``.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, DivergenceError, DomainError
from .numerics import as_tensor, cosine
from .schedules import ScheduleParams, guidance_weight, noise_schedule

log = logging.getLogger(__name__)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _t_column(t, ndim):
    """Scalar or per-batch ``t`` reshaped to broadcast against (B, n, d)."""
    t = as_tensor(t)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t={t} outside [0, 1]")
    return t if t.ndim == 0 else t.reshape(t.shape + (1,) * (ndim - t.ndim))


def forward_diffuse(x0, eps, t):
    x0, eps = as_tensor(x0), as_tensor(eps)
    _same_shape(x0, eps, "forward_diffuse")
    a, b = noise_schedule(t)
    return a * x0 + b * eps


def interpolate_path(x0, x1, t):
    x0, x1 = as_tensor(x0), as_tensor(x1)
    _same_shape(x0, x1, "interpolate_path")
    t = _t_column(t, x0.ndim)
    return (1.0 - t) * x0 + t * x1


def estimate_x0(x_t, t, v):
    x_t, v = as_tensor(x_t), as_tensor(v)
    _same_shape(x_t, v, "estimate_x0")
    return x_t - _t_column(t, x_t.ndim) * v


def flow_matching_loss(model, x0, x1, t, c, id_tokens):
    """Mean squared error between the predicted and the path velocity."""
    x0, x1 = as_tensor(x0), as_tensor(x1)
    v = model(interpolate_path(x0, x1, t), t, c, id_tokens)
    r = v - (x1 - x0)
    return float(np.mean(r * r))


def id_loss(x0_hat, e_ref, id_encoder):
    """One minus the cosine between the embedding of ``x0_hat`` and ``e_ref``."""
    return 1.0 - cosine(id_encoder(x0_hat), e_ref)


def total_loss(l_diff, l_id, lambda_id):
    return l_diff + lambda_id * l_id


def id_guidance(x_t, t, e_ref, model, id_encoder, c, id_tokens, noise_tokens=None, cap=None):
    """Gradient in ``x_t`` of cos(encoder(x_t - t * model(x_t)), e_ref).

    Batched inputs give one gradient per trajectory.  Gradients whose norm
    exceeds ``cap`` (default ``10 * sqrt(numel)`` per trajectory) are rescaled
    to the cap and a warning is logged.
    """
    x_t = as_tensor(x_t)
    v = model(x_t, t, c, id_tokens, noise_tokens=noise_tokens)
    x0_hat = estimate_x0(x_t, t, v)
    _, g_hat = id_encoder.cosine_and_grad(x0_hat, e_ref)
    tcol = _t_column(t, x_t.ndim)
    g = g_hat - model.vjp_x(x_t, t, c, id_tokens, tcol * g_hat, noise_tokens=noise_tokens)
    per = g.reshape(-1, g.shape[-2] * g.shape[-1]) if g.ndim == 3 else g.reshape(1, -1)
    if cap is None:
        cap = 10.0 * math.sqrt(per.shape[1])
    norms = np.linalg.norm(per, axis=1)
    over = norms > cap
    if np.any(over):
        log.warning("ID guidance norm %.3g exceeds cap %.3g; clipping", norms.max(), cap)
        scale = np.where(over, cap / np.where(over, norms, 1.0), 1.0)
        g = (per * scale[:, None]).reshape(g.shape)
    return g


@dataclass(frozen=True)
class SamplerConfig:
    """Euler sampler settings.

    ``guidance_scale`` is the base model's distilled-guidance input; the toy
    model has no such input, so it is carried for provenance only.
    ``cfg_scale`` drives classifier-free mixing against the null prompt and
    ``beta0`` scales the ID guidance term.
    """

    steps: int = 20
    cfg_scale: float = 1.0
    guidance_scale: float = 3.5
    beta0: float = 0.1
    method: str = "euler"
    qnoise_source: str = "current"
    grad_cap: float = None

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")
        for name in ("cfg_scale", "guidance_scale", "beta0"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative, got {val}")
        if self.method != "euler":
            raise ConfigurationError("only the explicit Euler sampler is supported")
        if self.qnoise_source not in ("current", "initial"):
            raise ConfigurationError("qnoise_source must be 'current' or 'initial'")

    def to_dict(self):
        return asdict(self)


def guided_velocity(model, x, t, c, id_tokens, cfg, null_c=None, noise_tokens=None):
    """Velocity with classifier-free mixing applied when ``cfg_scale != 1``."""
    v_c = model(x, t, c, id_tokens, noise_tokens=noise_tokens)
    if cfg.cfg_scale == 1.0:
        return v_c
    null_c = np.zeros_like(as_tensor(c)) if null_c is None else null_c
    v_u = model(x, t, null_c, id_tokens, noise_tokens=noise_tokens)
    return v_u + cfg.cfg_scale * (v_c - v_u)


def sample_euler(model, x1, c, id_tokens, e_ref, cfg, id_encoder=None, null_c=None):
    """Integrate from noise ``x1`` at t=1 to t=0 in ``cfg.steps`` Euler steps.

    Each step moves against the (possibly CFG-mixed) velocity and, when the
    guidance weight is positive, along the ID-similarity gradient:
    ``x <- x - dt * v + dt * beta(k / steps) * g``.
    """
    x = np.array(x1, dtype=np.float64, copy=True)
    dt = 1.0 / cfg.steps
    sched = ScheduleParams(beta0=cfg.beta0)
    noise_tokens = x.copy() if cfg.qnoise_source == "initial" else None
    if cfg.beta0 > 0 and id_encoder is None:
        raise ConfigurationError("ID guidance needs an id_encoder")
    for k in range(cfg.steps):
        t = 1.0 - k / cfg.steps
        v = guided_velocity(model, x, t, c, id_tokens, cfg, null_c, noise_tokens)
        beta = guidance_weight(k / cfg.steps, sched)
        if beta > 0.0:
            g = id_guidance(x, t, e_ref, model, id_encoder, c, id_tokens,
                            noise_tokens=noise_tokens, cap=cfg.grad_cap)
            x = x - dt * v + (dt * beta) * g
        else:
            x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"sampler state became non-finite at step {k}", step=k)
    return x
