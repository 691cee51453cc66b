"""Log-linear variance-exploding noise schedule and EDM preconditioning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from trajood.errors import ValidationError

T_EPS = 1e-3


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValidationError(f"time must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class Schedule:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    sigma_data: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValidationError("need 0 < sigma_min < sigma_max")
        if not self.sigma_data > 0.0:
            raise ValidationError("sigma_data must be positive")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma_max / self.sigma_min))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(float(d["sigma_min"]), float(d["sigma_max"]), float(d["sigma_data"]))


def sigma(s: Schedule, t):
    t = _check_t(t)
    return s.sigma_min * (s.sigma_max / s.sigma_min) ** t


def sigma_dot(s: Schedule, t):
    return sigma(s, t) * s.log_ratio


def diffusion_sq(s: Schedule, t):
    """g(t)^2 = d sigma^2 / dt for the variance-exploding forward SDE."""
    return 2.0 * sigma(s, t) * sigma_dot(s, t)


def alpha(s: Schedule, t):
    """Gain of the probability-flow drift, g^2 / (2 sigma^2) = sigma'/sigma.

    Constant ln(sigma_max / sigma_min) for this schedule.
    """
    t = _check_t(t)
    return np.full_like(t, s.log_ratio) if t.ndim else s.log_ratio


def precondition(s: Schedule, t):
    sig = sigma(s, t)
    denom = np.sqrt(sig**2 + s.sigma_data**2)
    return 1.0 / denom, sig * s.sigma_data / denom


def skip_scale(s: Schedule, t):
    """EDM skip weight sigma_data^2 / (sigma^2 + sigma_data^2)."""
    sig = sigma(s, t)
    return s.sigma_data**2 / (sig**2 + s.sigma_data**2)


def sample_time(rng: np.random.Generator, size=None, t_eps: float = T_EPS):
    return rng.uniform(t_eps, 1.0, size=size)


def loss_weight(s: Schedule, t):
    sig = sigma(s, t)
    return (sig**2 + s.sigma_data**2) / (sig * s.sigma_data) ** 2


def time_grid(steps: int, t_eps: float = T_EPS) -> np.ndarray:
    """Uniform grid of ``steps`` intervals on [t_eps, 1]."""
    if steps < 1:
        raise ValidationError("grid needs at least one step")
    return np.linspace(t_eps, 1.0, steps + 1)
