"""Time-dependent scalar schedules.

Every schedule works on normalized progress in [0, 1].  For the denoising
schedules (ID strength, guidance weight) progress 0 is the first denoising
step, i.e. flow time t = 1 (pure noise); use :func:`progress_from_flow_time`
to convert.
"""

import math
from dataclasses import asdict, dataclass

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class ScheduleParams:
    alpha0: float = 0.8
    T: int = 20
    beta0: float = 0.1
    lambda_id: float = 0.5
    lr0: float = 1e-3
    lr_min: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha0 <= 1.0:
            raise ConfigurationError(f"alpha0 must lie in [0, 1], got {self.alpha0}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"T must be a positive integer, got {self.T}")
        if self.beta0 < 0 or self.lambda_id < 0:
            raise ConfigurationError("beta0 and lambda_id must be non-negative")
        if self.lr0 <= 0 or self.lr_min < 0 or self.lr_min > self.lr0:
            raise ConfigurationError("need 0 <= lr_min <= lr0 and lr0 > 0")

    def to_dict(self):
        return asdict(self)


def _check_unit(t, name):
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"{name}: t={t} outside [0, 1]")


def noise_schedule(t):
    """Cosine-squared forward-process coefficients ``(a, b)``; ``a + b = 1``."""
    _check_unit(t, "noise_schedule")
    if t == 1.0:
        return 0.0, 1.0
    c = math.cos(math.pi * t / 2.0)
    a = c * c
    return a, 1.0 - a


def progress_from_flow_time(t):
    _check_unit(t, "progress_from_flow_time")
    return 1.0 - t


def id_strength_progress(p, params):
    """Linear ID strength ramp ``alpha0 * (1 - p)`` on normalized progress."""
    _check_unit(p, "id_strength")
    return params.alpha0 * (1.0 - p)


def id_strength(step, params):
    """ID strength at denoising step index ``step`` out of ``params.T``."""
    if not 0 <= step <= params.T:
        raise DomainError(f"id_strength: step {step} outside [0, {params.T}]")
    return id_strength_progress(step / params.T, params)


def guidance_weight(p, params):
    """Cosine-decayed guidance weight; ``beta0`` at p=0 down to 0 at p=1."""
    _check_unit(p, "guidance_weight")
    if p == 1.0:
        return 0.0
    c = math.cos(math.pi * p / 2.0)
    return params.beta0 * c * c


def lr_cosine(step, total_steps, params):
    if total_steps <= 0:
        raise DomainError("lr_cosine: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise DomainError(f"lr_cosine: step {step} outside [0, {total_steps}]")
    if step == 0:
        return params.lr0
    if step == total_steps:
        return params.lr_min
    cos = math.cos(math.pi * step / total_steps)
    lr = params.lr_min + 0.5 * (params.lr0 - params.lr_min) * (1.0 + cos)
    return min(max(lr, params.lr_min), params.lr0)
