"""Closed-form Gaussian-world oracle for the EPS statistic.

For natural data x ~ N(mu_x, sigma_x2 * I) pushed through the transition
kernel N(gamma_t x0, sigma_t^2 I), the perturbed marginal at time t is
N(gamma_t mu_x, (gamma_t^2 sigma_x2 + sigma_t^2) I), so its score is linear
and everything about the EPS statistic is available in closed form:

- the score of the perturbed marginal (``analytic_score``),
- the mean shift mu_S and per-component variance sigma_S^2 of the EPS
  difference between natural and offset samples (``eps_shift`` /
  ``eps_variance``), realized as uniform averages over a finite timestep
  grid, matching what the estimator actually computes,
- the probability that a Gaussian kernel of the EPS difference exceeds a
  threshold, via a noncentral chi-square CDF (``kernel_exceed_prob``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc

from epsdetect.schedule import NoiseSchedule

__all__ = [
    "GaussianWorld",
    "EpsTheory",
    "analytic_score",
    "eps_shift",
    "eps_variance",
    "eps_theory",
    "noncentral_chi2_cdf",
    "kernel_exceed_prob",
]


@dataclass(frozen=True)
class GaussianWorld:
    """Isotropic Gaussian data distribution N(mu_x, sigma_x2 * I)."""

    mu_x: np.ndarray
    sigma_x2: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_x, dtype=np.float64))
        object.__setattr__(self, "mu_x", mu)
        if not self.sigma_x2 > 0.0:
            raise ValueError(f"sigma_x2 must be positive, got {self.sigma_x2}")

    @property
    def d(self) -> int:
        return self.mu_x.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mu_x + math.sqrt(self.sigma_x2) * rng.standard_normal((n, self.d))

    def to_json(self) -> str:
        return json.dumps({"mu_x": self.mu_x.tolist(), "sigma_x2": self.sigma_x2})

    @classmethod
    def from_json(cls, text: str) -> "GaussianWorld":
        obj = json.loads(text)
        return cls(mu_x=np.asarray(obj["mu_x"], dtype=np.float64), sigma_x2=float(obj["sigma_x2"]))


@dataclass(frozen=True)
class EpsTheory:
    """Theoretical EPS difference statistics: S(x) - S(x + epsilon) ~ N(mu_S, 2 sigma_S2 I)."""

    mu_S: np.ndarray = field(repr=False)
    sigma_S2: float

    def __post_init__(self):
        object.__setattr__(self, "mu_S", np.atleast_1d(np.asarray(self.mu_S, dtype=np.float64)))
        if not self.sigma_S2 > 0.0:
            raise ValueError(f"sigma_S2 must be positive, got {self.sigma_S2}")


def _marginal_var(world: GaussianWorld, sched: NoiseSchedule, t) -> np.ndarray:
    """Per-component variance gamma_t^2 sigma_x2 + sigma_t^2 of the perturbed marginal."""
    g = sched.gamma(t)
    return g * g * world.sigma_x2 + sched.sigma2(t)


def analytic_score(world: GaussianWorld, sched: NoiseSchedule, x_t: np.ndarray, t) -> np.ndarray:
    """Score of the perturbed marginal: -(x_t - gamma_t mu_x) / (gamma_t^2 sigma_x2 + sigma_t^2).

    The denominator is strictly positive because sigma_x2 > 0, so the score
    is defined for every t in [0, t_max] including t = 0.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("x_t must be finite")
    g = sched.gamma(t)
    return -(x_t - g * world.mu_x) / _marginal_var(world, sched, t)


def _check_grid(sched: NoiseSchedule, timesteps) -> np.ndarray:
    ts = np.asarray(timesteps, dtype=np.float64).ravel()
    if ts.size == 0:
        raise ValueError("timestep list must be non-empty")
    if np.any(ts < 0.0) or np.any(ts > sched.t_max):
        raise ValueError(f"timesteps must lie in [0, {sched.t_max}]")
    return ts


def eps_shift(
    world: GaussianWorld, sched: NoiseSchedule, epsilon_vec: np.ndarray, timesteps
) -> np.ndarray:
    """Mean shift mu_S of S(x) - S(x_hat): the grid average of eps / (gamma_t^2 sigma_x2 + sigma_t^2)."""
    eps = np.asarray(epsilon_vec, dtype=np.float64)
    ts = _check_grid(sched, timesteps)
    inv = 1.0 / _marginal_var(world, sched, ts)
    return eps * float(np.mean(inv))


def eps_variance(world: GaussianWorld, sched: NoiseSchedule, timesteps) -> float:
    """Per-component EPS variance sigma_S^2: the grid average of 1 / (gamma_t^2 sigma_x2 + sigma_t^2)."""
    ts = _check_grid(sched, timesteps)
    return float(np.mean(1.0 / _marginal_var(world, sched, ts)))


def eps_theory(
    world: GaussianWorld, sched: NoiseSchedule, epsilon_vec: np.ndarray, timesteps
) -> EpsTheory:
    """Bundle mu_S and sigma_S^2 for a given attack offset and timestep grid."""
    return EpsTheory(
        mu_S=eps_shift(world, sched, epsilon_vec, timesteps),
        sigma_S2=eps_variance(world, sched, timesteps),
    )


def noncentral_chi2_cdf(x: float, d: int, lam: float, tail: float = 1e-12) -> float:
    """CDF of the noncentral chi-square with d degrees of freedom, noncentrality lam.

    Uses the Poisson mixture of central chi-square CDFs,

        P(X <= x) = sum_j Poisson(j; lam/2) * P(chi2_{d+2j} <= x),

    truncated once the remaining Poisson tail mass drops below ``tail``.
    The truncation error is bounded by the discarded mass because each
    central CDF term lies in [0, 1].

    Args:
        x: evaluation point, >= 0.
        d: degrees of freedom, >= 1.
        lam: noncentrality parameter, >= 0.
        tail: Poisson tail mass at which the series stops.

    Returns:
        P(X <= x) in [0, 1].
    """
    if x < 0.0:
        raise ValueError(f"x must be >= 0, got {x}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if x == 0.0:
        return 0.0

    half_lam = 0.5 * lam
    # Poisson(j; half_lam) weights, accumulated until the tail is negligible.
    log_w = -half_lam  # log weight at j = 0
    total = 0.0
    consumed = 0.0
    j = 0
    # Worst case: j grows until the Poisson mass around half_lam is swept up.
    max_terms = int(half_lam + 60.0 * math.sqrt(half_lam + 1.0) + 100)
    while j < max_terms:
        w = math.exp(log_w)
        # Central chi-square CDF with d + 2j dof = regularized lower gamma.
        total += w * float(gammainc(0.5 * d + j, 0.5 * x))
        consumed += w
        if 1.0 - consumed < tail:
            break
        j += 1
        log_w += math.log(half_lam) - math.log(j)
    return min(1.0, total)


def kernel_exceed_prob(
    eta: float, sigma_kernel: float, sigma_S2: float, mu_S: np.ndarray, d: int
) -> float:
    """P{ k(S(x), S(x_hat)) > eta } for the Gaussian kernel of bandwidth sigma_kernel.

    With S(x) - S(x_hat) ~ N(mu_S, 2 sigma_S2 I), the event
    k > eta is ||S(x)-S(x_hat)||^2 < -2 sigma_kernel^2 ln(eta); standardizing
    each component by sqrt(2) sigma_S turns the squared norm into a
    noncentral chi-square with d dof and noncentrality ||mu_S||^2 / (2 sigma_S2),
    evaluated at C = -sigma_kernel^2 ln(eta) / sigma_S2.

    The placement of the 1/(2 sigma_S2) factor on the noncentrality is the
    convention that matches direct Monte Carlo simulation of the event.
    Monotone nonincreasing in ||mu_S||^2 and nondecreasing as eta decreases.
    """
    if not (0.0 < eta < 1.0):
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if not sigma_kernel > 0.0:
        raise ValueError(f"sigma_kernel must be positive, got {sigma_kernel}")
    if not sigma_S2 > 0.0:
        raise ValueError(f"sigma_S2 must be positive, got {sigma_S2}")
    mu = np.asarray(mu_S, dtype=np.float64)
    c = -sigma_kernel * sigma_kernel * math.log(eta) / sigma_S2
    lam = float(mu @ mu) / (2.0 * sigma_S2)
    return noncentral_chi2_cdf(c, d, lam)
