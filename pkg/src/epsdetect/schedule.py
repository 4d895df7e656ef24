"""Variance-preserving forward-diffusion noise schedule.

The forward process is the VP-SDE with a linear rate

    beta(t) = beta_min + (beta_max - beta_min) * t / t_max,   t in [0, t_max],

whose transition kernel is N(gamma(t) * x0, sigma2(t) * I) with

    gamma(t)  = exp(-1/2 * int_0^t beta(s) ds)
    sigma2(t) = 1 - gamma(t)^2.

The integral of the linear rate is evaluated in closed form, so the
variance-preserving identity gamma^2 + sigma2 = 1 holds to the last bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseSchedule"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable linear VP noise schedule.

    Args:
        beta_min: rate at t=0 (per unit diffusion time), >= 0.
        beta_max: rate at t=t_max, >= beta_min.
        t_max: diffusion horizon, > 0.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1000.0

    def __post_init__(self):
        if not (0.0 <= self.beta_min <= self.beta_max):
            raise ValueError(
                f"need 0 <= beta_min <= beta_max, got ({self.beta_min}, {self.beta_max})"
            )
        if not self.t_max > 0.0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.t_max):
            raise ValueError(f"t must lie in [0, {self.t_max}], got {t}")
        return t

    def beta(self, t):
        """Instantaneous rate beta(t) = beta_min + (beta_max - beta_min) t / t_max."""
        t = self._check_t(t)
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.t_max

    def beta_integral(self, t):
        """Closed form of int_0^t beta(s) ds for the linear rate."""
        t = self._check_t(t)
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.t_max)

    def gamma(self, t):
        """Mean-scaling coefficient gamma(t) = exp(-1/2 int_0^t beta)."""
        return np.exp(-0.5 * self.beta_integral(t))

    def sigma2(self, t):
        """Perturbation variance sigma2(t) = 1 - gamma(t)^2.

        Computed as -expm1(-int beta) so that gamma^2 + sigma2 = 1 exactly.
        """
        return -np.expm1(-self.beta_integral(t))

    def sigma(self, t):
        """Perturbation standard deviation sqrt(sigma2(t))."""
        return np.sqrt(self.sigma2(t))

    def perturb(self, x0: np.ndarray, t, rng: np.random.Generator) -> np.ndarray:
        """Sample from the transition kernel N(gamma(t) x0, sigma2(t) I).

        Args:
            x0: clean input, shape (d,) or (n, d).
            t: scalar diffusion time in [0, t_max].
            rng: generator supplying the standard-normal draw; one
                independent draw per component, deterministic given seed.

        Returns:
            Perturbed sample of the same shape as ``x0``.
        """
        x0 = np.asarray(x0, dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        t = float(self._check_t(t))
        g = self.gamma(t)
        s = self.sigma(t)
        if s == 0.0:
            return g * x0
        return g * x0 + s * rng.standard_normal(x0.shape)

    def to_json(self) -> str:
        """Serialize to the wire format {"beta_min": f, "beta_max": f, "t_max": f}."""
        return json.dumps(
            {"beta_min": self.beta_min, "beta_max": self.beta_max, "t_max": self.t_max}
        )

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        obj = json.loads(text)
        return cls(
            beta_min=float(obj["beta_min"]),
            beta_max=float(obj["beta_max"]),
            t_max=float(obj["t_max"]),
        )
