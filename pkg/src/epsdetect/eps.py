"""The expected perturbation score statistic S(x) and its baselines.

S(x) is the average, over a finite timestep grid, of the score of a freshly
perturbed copy of x: each grid point gets one independent draw from the
transition kernel conditioned on the *original* x (draws are not chained).
The score comes either from the closed-form Gaussian-world oracle or from a
trained score network; both sides expose the same (x, t) -> vector contract.

Baselines: ``eps_norm`` is ||S(x)||^2; ``single_score_norm`` is the squared
score norm of one perturbed copy at a single timestep.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from epsdetect.analytic import GaussianWorld, analytic_score
from epsdetect.schedule import NoiseSchedule
from epsdetect.scorenet import ScoreNet
from epsdetect.scorenet import forward as scorenet_forward

__all__ = [
    "TimeGrid",
    "ScoreSource",
    "EpsVector",
    "compute_eps",
    "eps_batch",
    "eps_norm",
    "single_score_norm",
    "write_eps_csv",
    "read_eps_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Affine map from grid index i in {1..t_star} to diffusion time t(i) = offset + i * dt.

    The default (dt=1, offset=0) is the integer-timestep convention t(i) = i.
    Smaller dt places the whole grid in the early-diffusion regime.
    """

    t_star: int
    dt: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.t_star < 1:
            raise ValueError(f"t_star must be >= 1, got {self.t_star}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.offset + self.dt <= 0.0:
            raise ValueError("t(1) must be positive")

    def times(self) -> np.ndarray:
        """Strictly increasing times t(1) .. t(t_star)."""
        return self.offset + self.dt * np.arange(1, self.t_star + 1, dtype=np.float64)


@dataclass(frozen=True)
class ScoreSource:
    """Score function plus the schedule that defines its perturbation process.

    variant "analytic" wraps a GaussianWorld; variant "learned" wraps a
    ScoreNet. Both are pure and safe to share across threads.
    """

    variant: str
    scorer: object
    sched: NoiseSchedule

    def __post_init__(self):
        if self.variant == "analytic":
            if not isinstance(self.scorer, GaussianWorld):
                raise TypeError("analytic variant requires a GaussianWorld")
        elif self.variant == "learned":
            if not isinstance(self.scorer, ScoreNet):
                raise TypeError("learned variant requires a ScoreNet")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def analytic(cls, world: GaussianWorld, sched: NoiseSchedule) -> "ScoreSource":
        return cls("analytic", world, sched)

    @classmethod
    def learned(cls, net: ScoreNet, sched: NoiseSchedule) -> "ScoreSource":
        return cls("learned", net, sched)

    def score(self, x: np.ndarray, t) -> np.ndarray:
        if self.variant == "analytic":
            return analytic_score(self.scorer, self.sched, x, t)
        return scorenet_forward(self.scorer, x, t, t_scale=self.sched.t_max)


@dataclass(frozen=True)
class EpsVector:
    """EPS statistic with provenance: the grid size and seed that produced it."""

    values: np.ndarray = field(repr=False)
    t_star: int = 0
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("EPS components must be finite")


def _as_rng(rng_or_seed):
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed, None
    seed = int(rng_or_seed)
    return np.random.default_rng(seed), seed


def compute_eps(src: ScoreSource, x: np.ndarray, grid: TimeGrid, rng, trajectory=False) -> EpsVector:
    """S(x) = (1/T*) sum_i score(perturb(x, t(i)), t(i)).

    By default each grid point gets one independent transition-kernel draw
    conditioned on the original x. With ``trajectory=True`` the perturbed
    points form a single forward-diffusion path instead (x_{t(i+1)} drawn
    from the kernel conditioned on x_{t(i)}); the per-point marginals are
    identical, only the correlation structure differs. ``rng`` may be a
    Generator (consumed sequentially, one draw per grid point) or an
    integer seed, in which case the seed is recorded on the result.
    """
    x = np.asarray(x, dtype=np.float64)
    gen, seed = _as_rng(rng)
    acc = np.zeros_like(x)
    if trajectory:
        for x_t, t in _trajectory_points(src.sched, x, grid, gen):
            acc += src.score(x_t, t)
    else:
        for t in grid.times():
            x_t = src.sched.perturb(x, t, gen)
            acc += src.score(x_t, t)
    return EpsVector(values=acc / grid.t_star, t_star=grid.t_star, seed=seed)


def _trajectory_points(sched, x, grid: TimeGrid, gen):
    """Yield (x_t, t) along one forward path; each x_t has the kernel marginal.

    The VP chain step from t1 to t2 is itself a VP kernel: scale
    exp(-(I(t2)-I(t1))/2), variance -expm1(-(I(t2)-I(t1))) with I the
    rate integral (stable even when gamma underflows).
    """
    prev_ib = 0.0
    x_t = x
    for t in grid.times():
        ib = float(sched.beta_integral(t))
        step_scale = np.exp(-0.5 * (ib - prev_ib))
        step_var = -np.expm1(-(ib - prev_ib))
        if step_var == 0.0:
            x_t = step_scale * x_t
        else:
            x_t = step_scale * x_t + np.sqrt(step_var) * gen.standard_normal(x.shape)
        prev_ib = ib
        yield x_t, t


def eps_batch(
    src: ScoreSource, xs: np.ndarray, grid: TimeGrid, root_seed: int, trajectory=False
) -> np.ndarray:
    """EPS values for a batch, shape (n, d), reproducible from one root seed.

    Per-sample generators are derived as SeedSequence(root_seed).spawn(n);
    sample i consumes child i exactly as ``compute_eps`` would (bit-identical
    to a per-sample loop), so results are independent of any parallel or
    batched evaluation order. Scoring is batched per grid point.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n, d = xs.shape
    children = np.random.SeedSequence(root_seed).spawn(n)
    gens = [np.random.default_rng(child) for child in children]
    acc = np.zeros_like(xs)
    x_t = xs
    prev_ib = 0.0
    for t in grid.times():
        if trajectory:
            ib = float(src.sched.beta_integral(t))
            step_scale = np.exp(-0.5 * (ib - prev_ib))
            step_var = -np.expm1(-(ib - prev_ib))
            if step_var == 0.0:
                x_t = step_scale * x_t
            else:
                z = np.stack([gen.standard_normal(d) for gen in gens])
                x_t = step_scale * x_t + np.sqrt(step_var) * z
            prev_ib = ib
        else:
            g = src.sched.gamma(t)
            s = src.sched.sigma(t)
            if s == 0.0:
                x_t = g * xs  # no draw consumed, matching NoiseSchedule.perturb
            else:
                z = np.stack([gen.standard_normal(d) for gen in gens])
                x_t = g * xs + s * z
        acc += src.score(x_t, t)
    return acc / grid.t_star


def eps_norm(s: EpsVector) -> float:
    """Squared Euclidean norm of the EPS vector (the EPS-N baseline)."""
    v = s.values if isinstance(s, EpsVector) else np.asarray(s, dtype=np.float64)
    return float(v @ v)


def single_score_norm(src: ScoreSource, x: np.ndarray, t_star: float, rng) -> float:
    """Squared score norm of one perturbed copy at a single timestep (the S-N baseline)."""
    if not (0.0 < t_star <= src.sched.t_max):
        raise ValueError(f"t_star must lie in (0, {src.sched.t_max}], got {t_star}")
    x = np.asarray(x, dtype=np.float64)
    gen, _ = _as_rng(rng)
    x_t = src.sched.perturb(x, t_star, gen)
    s = src.score(x_t, t_star)
    return float(s @ s)


def write_eps_csv(path: str, eps_vectors) -> None:
    """One row per sample: d components, then seed and T*."""
    eps_vectors = list(eps_vectors)
    if not eps_vectors:
        raise ValueError("nothing to write")
    d = eps_vectors[0].values.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"s{i}" for i in range(d)] + ["seed", "t_star"])
        for ev in eps_vectors:
            seed = "" if ev.seed is None else ev.seed
            writer.writerow([repr(float(v)) for v in ev.values] + [seed, ev.t_star])


def read_eps_csv(path: str):
    """Inverse of ``write_eps_csv``."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 2
        for row in reader:
            values = np.asarray([float(v) for v in row[:d]])
            seed = None if row[d] == "" else int(row[d])
            out.append(EpsVector(values=values, t_star=int(row[d + 1]), seed=seed))
    return out
