"""End-to-end detection pipeline, AUROC, ablation sweeps, and persistence.

``detect`` wires a configured world, schedule, score source, and detector
into per-sample statistics plus an exact AUROC (adversarial = positive
class, larger statistic = more adversarial). ``timestep_sweep`` reruns
detection across timestep-grid sizes. ``validate_theorem1`` and
``validate_corollary1`` are the Monte Carlo checks of the Gaussian-world
theory; the CLI and the acceptance suite call the same functions.

Everything is reproducible from a root seed: per-role generators are
spawned as SeedSequence(seed).spawn(...) in a fixed documented order
(data, classifier, attack, reference EPS, natural EPS, adversarial EPS),
and per-sample EPS generators are spawned per sample, so results do not
depend on evaluation order.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from epsdetect.analytic import (
    GaussianWorld,
    eps_shift,
    eps_variance,
    kernel_exceed_prob,
)
from epsdetect.attacks import AttackConfig, ToyClassifier, attack, parse_epsilon, train_classifier
from epsdetect.eps import ScoreSource, TimeGrid, compute_eps, eps_batch
from epsdetect.mmd import KernelSpec, gram, kernel_eval, median_heuristic
from epsdetect.schedule import NoiseSchedule
from epsdetect.scorenet import ScoreNet

__all__ = [
    "WorldSpec",
    "ExperimentConfig",
    "DetectionReport",
    "auroc",
    "generate_world_data",
    "detect",
    "timestep_sweep",
    "validate_theorem1",
    "validate_corollary1",
    "write_data_csv",
    "read_data_csv",
]

DETECTORS = ("eps-mmd-deep", "eps-mmd-gaussian", "eps-norm", "single-score-norm", "raw-mmd")


# ---------------------------------------------------------------------------
# Worlds and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldSpec:
    """Class-conditional Gaussian data: one mean per class, shared per-axis scales.

    ``bounds`` declares the input domain (used to scale pixel-style attack
    budgets and to clip attacked points); None means unbounded.
    """

    means: np.ndarray
    scales: np.ndarray
    bounds: tuple | None = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        scales = np.broadcast_to(
            np.asarray(self.scales, dtype=np.float64), (means.shape[1],)
        ).copy()
        if np.any(scales <= 0.0):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "scales", scales)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def span(self) -> float:
        if self.bounds is None:
            raise ValueError("world declares no bounds")
        return float(self.bounds[1] - self.bounds[0])


def generate_world_data(spec: WorldSpec, counts, rng: np.random.Generator):
    """Draw labeled vectors class-conditionally; per-class counts honored exactly."""
    counts = [int(c) for c in np.atleast_1d(counts)]
    if len(counts) != spec.n_classes:
        raise ValueError(f"need one count per class ({spec.n_classes}), got {len(counts)}")
    xs, ys = [], []
    for cls, count in enumerate(counts):
        x = spec.means[cls] + spec.scales * rng.standard_normal((count, spec.d))
        xs.append(x)
        ys.append(np.full(count, cls, dtype=int))
    if sum(counts) == 0:
        return np.zeros((0, spec.d)), np.zeros(0, dtype=int)
    return np.vstack(xs), np.concatenate(ys)


def write_data_csv(path: str, x: np.ndarray, labels=None) -> None:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"x{i}" for i in range(x.shape[1])]
        if labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(x.shape[0]):
            row = [repr(float(v)) for v in x[i]]
            if labels is not None:
                row.append(int(labels[i]))
            writer.writerow(row)


def read_data_csv(path: str):
    """Returns (x, labels) with labels None when the file has no label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_label = header[-1] == "label"
        d = len(header) - (1 if has_label else 0)
        xs, ys = [], []
        for row in reader:
            xs.append([float(v) for v in row[:d]])
            if has_label:
                ys.append(int(row[d]))
    x = np.asarray(xs, dtype=np.float64)
    return x, (np.asarray(ys, dtype=int) if has_label else None)


# ---------------------------------------------------------------------------
# AUROC (exact Mann-Whitney formulation)
# ---------------------------------------------------------------------------


def auroc(nat_scores, adv_scores) -> float:
    """(# pairs adv > nat + 0.5 * # ties) / (|nat| * |adv|), computed via ranks."""
    nat = np.asarray(nat_scores, dtype=np.float64).ravel()
    adv = np.asarray(adv_scores, dtype=np.float64).ravel()
    if nat.size == 0 or adv.size == 0:
        raise ValueError("both score lists must be non-empty")
    merged = np.concatenate([nat, adv])
    order = np.argsort(merged, kind="stable")
    ranks = np.empty(merged.size, dtype=np.float64)
    sorted_vals = merged[order]
    i = 0
    while i < merged.size:
        j = i
        while j + 1 < merged.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_adv = float(ranks[nat.size :].sum())
    u = rank_sum_adv - adv.size * (adv.size + 1) / 2.0
    return u / (nat.size * adv.size)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one detection run (see README for the JSON schema)."""

    raw: dict = field(repr=False)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls(raw=json.loads(text))

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls(raw=json.load(fh))

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        merged = dict(self.raw)
        merged.update({k: v for k, v in kwargs.items() if v is not None})
        return ExperimentConfig(raw=merged)

    # -- typed accessors -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def schedule(self) -> NoiseSchedule:
        s = self.raw.get("schedule", {})
        return NoiseSchedule(
            beta_min=float(s.get("beta_min", 0.1)),
            beta_max=float(s.get("beta_max", 20.0)),
            t_max=float(s.get("t_max", 1000.0)),
        )

    def grid(self) -> TimeGrid:
        g = self.raw.get("grid", {})
        return TimeGrid(
            t_star=int(g.get("t_star", 20)),
            dt=float(g.get("dt", 1.0)),
            offset=float(g.get("offset", 0.0)),
        )

    @property
    def detector(self) -> str:
        det = self.raw.get("detector", "eps-mmd-gaussian")
        if det not in DETECTORS:
            raise ValueError(f"unknown detector {det!r}; choose from {DETECTORS}")
        return det

    @property
    def world_type(self) -> str:
        return self.raw.get("world", {}).get("type", "gaussian")

    def gaussian_world(self) -> GaussianWorld:
        w = self.raw["world"]
        return GaussianWorld(
            mu_x=np.asarray(w["mu_x"], dtype=np.float64), sigma_x2=float(w["sigma_x2"])
        )

    def class_world(self) -> WorldSpec:
        w = self.raw["world"]
        bounds = tuple(w["bounds"]) if w.get("bounds") else None
        return WorldSpec(
            means=np.asarray(w["means"], dtype=np.float64),
            scales=np.asarray(w["scales"], dtype=np.float64),
            bounds=bounds,
        )

    def attack_config(self, world: WorldSpec | None = None) -> AttackConfig:
        a = dict(self.raw.get("attack", {}))
        eps = parse_epsilon(a.get("epsilon", "4/255"))
        if a.get("scale_to_range", False):
            if world is None or world.bounds is None:
                raise ValueError("scale_to_range requires a world with declared bounds")
            eps *= world.span
        steps = int(a.get("steps", 5))
        step_size = a.get("step_size")
        clip = world.bounds if (world is not None and a.get("clip", False)) else None
        return AttackConfig(
            method=a.get("method", "pgd"),
            norm=a.get("norm", "linf"),
            epsilon=eps,
            steps=steps,
            step_size=float(step_size) if step_size is not None else None,
            momentum_decay=float(a.get("momentum_decay", 1.0)),
            random_init=bool(a.get("random_init", True)),
            clip=clip,
        )


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionReport:
    """Per-sample statistics with labels, the AUROC, and the full config echo."""

    rows: list  # (sample id, "natural" | "adversarial", statistic)
    auroc: float
    config: dict
    wall_clock: float

    def __post_init__(self):
        if not (0.0 <= self.auroc <= 1.0):
            raise ValueError(f"auroc out of range: {self.auroc}")

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "statistic"])
            for sid, label, stat in self.rows:
                writer.writerow([sid, label, repr(float(stat))])

    def summary(self) -> dict:
        # Wall clock is deliberately left out: persisted outputs must be
        # bit-identical across reruns of the same config and seed.
        return {
            "auroc": self.auroc,
            "n_natural": sum(1 for r in self.rows if r[1] == "natural"),
            "n_adversarial": sum(1 for r in self.rows if r[1] == "adversarial"),
            "config": self.config,
        }

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _score_source(cfg: ExperimentConfig, sched: NoiseSchedule) -> ScoreSource:
    s = cfg.raw.get("score", {"type": "analytic"})
    if s.get("type") == "analytic":
        if cfg.world_type != "gaussian":
            raise ValueError(
                "configuration error: analytic score source requires a gaussian world"
            )
        return ScoreSource.analytic(cfg.gaussian_world(), sched)
    if s.get("type") == "checkpoint":
        path = s.get("path")
        if not path:
            raise ValueError("configuration error: score checkpoint path missing")
        try:
            net = ScoreNet.load(path)
        except FileNotFoundError as exc:
            raise ValueError(f"configuration error: score checkpoint not found: {path}") from exc
        return ScoreSource.learned(net, sched)
    raise ValueError(f"unknown score source {s.get('type')!r}")


def _build_sets(cfg: ExperimentConfig, rng_data, rng_clf, rng_attack):
    """Reference naturals, test naturals, adversarial tests (+ optional classifier)."""
    n_ref = int(cfg.raw.get("n_ref", 500))
    n_nat = int(cfg.raw.get("n_nat", 500))
    n_adv = int(cfg.raw.get("n_adv", 500))
    if min(n_ref, n_nat, n_adv) < 1:
        raise ValueError("set sizes must be >= 1")

    if cfg.world_type == "gaussian":
        world = cfg.gaussian_world()
        refs = world.sample(n_ref, rng_data)
        nat = world.sample(n_nat, rng_data)
        shift = np.asarray(cfg.raw.get("epsilon_shift", [0.0] * world.d), dtype=np.float64)
        adv = world.sample(n_adv, rng_data) + shift
        return refs, nat, adv, None

    world = cfg.class_world()
    per_class = [c for c in _split_counts(n_ref, world.n_classes)]
    refs, _ = generate_world_data(world, per_class, rng_data)
    nat, _ = generate_world_data(world, _split_counts(n_nat, world.n_classes), rng_data)
    base, base_labels = generate_world_data(world, _split_counts(n_adv, world.n_classes), rng_data)

    clf_path = cfg.raw.get("classifier", {}).get("path")
    if clf_path:
        try:
            clf = ToyClassifier.load(clf_path)
        except FileNotFoundError as exc:
            raise ValueError(f"configuration error: classifier not found: {clf_path}") from exc
    else:
        n_train = int(cfg.raw.get("classifier", {}).get("n_train", 1000))
        train_x, train_y = generate_world_data(
            world, _split_counts(n_train, world.n_classes), rng_clf
        )
        clf = train_classifier(train_x, train_y, seed=cfg.seed)
    atk = cfg.attack_config(world)
    adv = attack(clf, base, base_labels, atk, rng_attack)
    return refs, nat, adv, clf


def _split_counts(total: int, classes: int):
    base = total // classes
    counts = [base] * classes
    for i in range(total - base * classes):
        counts[i] += 1
    return counts


def detect(cfg: ExperimentConfig) -> DetectionReport:
    """Run the configured detector over fresh natural/adversarial test sets."""
    started = time.perf_counter()
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng_data = np.random.default_rng(seeds[0])
    rng_clf = np.random.default_rng(seeds[1])
    rng_attack = np.random.default_rng(seeds[2])

    sched = cfg.schedule()
    grid = cfg.grid()
    refs, nat, adv, _ = _build_sets(cfg, rng_data, rng_clf, rng_attack)
    detector = cfg.detector
    add_noise = bool(cfg.raw.get("perturb", True))

    if detector == "raw-mmd":
        spec = KernelSpec.gaussian(median_heuristic(refs))
        nat_stats = _mmd_stats(spec, refs, nat)
        adv_stats = _mmd_stats(spec, refs, adv)
    else:
        src = _score_source(cfg, sched)
        if detector == "single-score-norm":
            t_single = float(cfg.raw.get("t_single", 5.0 * grid.dt))
            nat_stats = _single_norm_stats(src, nat, t_single, seeds[4], add_noise)
            adv_stats = _single_norm_stats(src, adv, t_single, seeds[5], add_noise)
        else:
            trajectory = bool(cfg.raw.get("trajectory", False))
            ref_eps = _eps_matrix(src, refs, grid, seeds[3], add_noise, trajectory)
            nat_eps = _eps_matrix(src, nat, grid, seeds[4], add_noise, trajectory)
            adv_eps = _eps_matrix(src, adv, grid, seeds[5], add_noise, trajectory)
            if detector == "eps-norm":
                nat_stats = np.sum(nat_eps * nat_eps, axis=1)
                adv_stats = np.sum(adv_eps * adv_eps, axis=1)
            else:
                spec = _detection_kernel(cfg, detector, ref_eps)
                nat_stats = _mmd_stats(spec, ref_eps, nat_eps)
                adv_stats = _mmd_stats(spec, ref_eps, adv_eps)

    score = auroc(nat_stats, adv_stats)
    rows = [(i, "natural", float(s)) for i, s in enumerate(nat_stats)]
    rows += [(len(nat_stats) + i, "adversarial", float(s)) for i, s in enumerate(adv_stats)]
    return DetectionReport(
        rows=rows,
        auroc=score,
        config=dict(cfg.raw),
        wall_clock=time.perf_counter() - started,
    )


def _detection_kernel(cfg: ExperimentConfig, detector: str, ref_eps: np.ndarray) -> KernelSpec:
    if detector == "eps-mmd-deep":
        path = cfg.raw.get("kernel", {}).get("path")
        if not path:
            raise ValueError("configuration error: eps-mmd-deep requires kernel.path")
        try:
            with open(path) as fh:
                return KernelSpec.from_json(fh.read())
        except FileNotFoundError as exc:
            raise ValueError(f"configuration error: kernel file not found: {path}") from exc
    sigma = cfg.raw.get("kernel", {}).get("sigma")
    return KernelSpec.gaussian(float(sigma) if sigma else median_heuristic(ref_eps))


def _eps_matrix(src, xs, grid, seed_seq, add_noise: bool, trajectory: bool = False) -> np.ndarray:
    if add_noise:
        return eps_batch(src, xs, grid, _seq_seed(seed_seq), trajectory=trajectory)
    # Perturbation ablation: deterministic mean path x_t = gamma_t x only.
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    acc = np.zeros_like(xs)
    for t in grid.times():
        acc += src.score(src.sched.gamma(t) * xs, t)
    return acc / grid.t_star


def _single_norm_stats(src, xs, t_single, seed_seq, add_noise: bool) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if add_noise:
        children = np.random.SeedSequence(_seq_seed(seed_seq)).spawn(xs.shape[0])
        g = src.sched.gamma(t_single)
        sig = src.sched.sigma(t_single)
        if sig == 0.0:
            x_t = g * xs
        else:
            z = np.stack(
                [np.random.default_rng(c).standard_normal(xs.shape[1]) for c in children]
            )
            x_t = g * xs + sig * z
        s = src.score(x_t, t_single)
        return np.sum(s * s, axis=1)
    s = src.score(src.sched.gamma(t_single) * xs, t_single)
    return np.sum(s * s, axis=1)


def _seq_seed(seed_seq: np.random.SeedSequence) -> int:
    return int(seed_seq.generate_state(1)[0])


def _mmd_stats(spec: KernelSpec, refs: np.ndarray, tests: np.ndarray) -> np.ndarray:
    """Vector of mmd2_biased(refs, y) over test rows; the set term is shared."""
    refs = np.atleast_2d(refs)
    tests = np.atleast_2d(tests)
    term_rr = float(np.mean(gram(spec, refs, refs)))
    cross = gram(spec, refs, tests).mean(axis=0)
    self_term = np.array([kernel_eval(spec, t, t) for t in tests])
    return term_rr - 2.0 * cross + self_term


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def timestep_sweep(cfg: ExperimentConfig, t_values) -> list:
    """AUROC per grid size for the EPS detectors and per timestep for S-N.

    Returns rows (method, T, auroc). The EPS detector is whichever
    eps-mmd variant the config names (eps-mmd-gaussian when the config
    names a non-EPS detector); eps-norm and single-score-norm are swept
    alongside.
    """
    t_values = [int(t) for t in t_values]
    rows = []
    eps_detector = cfg.detector if cfg.detector.startswith("eps-mmd") else "eps-mmd-gaussian"
    for t in t_values:
        grid_cfg = dict(cfg.raw.get("grid", {}))
        grid_cfg["t_star"] = t
        for method in (eps_detector, "eps-norm"):
            sub = cfg.with_overrides(grid=grid_cfg, detector=method)
            rows.append((method, t, detect(sub).auroc))
    for t in t_values:
        dt = cfg.grid().dt
        sub = cfg.with_overrides(detector="single-score-norm", t_single=float(t) * dt)
        rows.append(("single-score-norm", t, detect(sub).auroc))
    return rows


def write_sweep_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "T", "auroc"])
        for method, t, score in rows:
            writer.writerow([method, t, repr(float(score))])


# ---------------------------------------------------------------------------
# Monte Carlo theory validation (Theorem 1 / Corollary 1)
# ---------------------------------------------------------------------------


def validate_theorem1(
    world: GaussianWorld,
    sched: NoiseSchedule,
    grid: TimeGrid,
    epsilon_vec: np.ndarray,
    n_draws: int = 20000,
    seed: int = 0,
    var_rtol: float = 0.05,
) -> dict:
    """Monte Carlo check of the Gaussian-world EPS statistics.

    Estimates S over natural draws and offset draws through the actual
    perturb-then-score pipeline and compares (a) the natural mean against 0,
    (b) the mean difference against the predicted shift, both at 3 standard
    errors per component, and (c) the per-component variance of the
    difference against twice the predicted per-component variance at
    relative tolerance ``var_rtol``.
    """
    src = ScoreSource.analytic(world, sched)
    epsilon_vec = np.asarray(epsilon_vec, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(seeds[0])

    x_nat = world.sample(n_draws, rng)
    x_adv = world.sample(n_draws, rng) + epsilon_vec
    s_nat = eps_batch(src, x_nat, grid, _seq_seed(seeds[1]))
    s_adv = eps_batch(src, x_adv, grid, _seq_seed(seeds[2]))

    diff_mean_pred = eps_shift(world, sched, epsilon_vec, grid.times())
    var_pred = 2.0 * eps_variance(world, sched, grid.times())

    nat_mean = s_nat.mean(axis=0)
    nat_se = s_nat.std(axis=0, ddof=1) / np.sqrt(n_draws)
    # Natural and offset EPS are independent; the difference mean/variance
    # follow from the two one-sample estimates.
    diff_mean = s_nat.mean(axis=0) - s_adv.mean(axis=0)
    diff_var = s_nat.var(axis=0, ddof=1) + s_adv.var(axis=0, ddof=1)
    diff_se = np.sqrt(diff_var / n_draws)

    mean_zero_ok = bool(np.all(np.abs(nat_mean) <= 3.0 * nat_se))
    shift_ok = bool(np.all(np.abs(diff_mean - diff_mean_pred) <= 3.0 * diff_se))
    var_ok = bool(np.all(np.abs(diff_var - var_pred) <= var_rtol * var_pred))
    return {
        "n_draws": n_draws,
        "natural_mean_max_abs_se": float(np.max(np.abs(nat_mean) / nat_se)),
        "shift_max_abs_se": float(np.max(np.abs(diff_mean - diff_mean_pred) / diff_se)),
        "variance_max_rel_dev": float(np.max(np.abs(diff_var - var_pred) / var_pred)),
        "mean_zero_ok": mean_zero_ok,
        "shift_ok": shift_ok,
        "variance_ok": var_ok,
        "passed": mean_zero_ok and shift_ok and var_ok,
    }


def validate_corollary1(
    d: int,
    sigma_kernel: float,
    settings,
    etas=(0.2, 0.5, 0.8),
    n_draws: int = 100000,
    seed: int = 0,
) -> dict:
    """Monte Carlo check of the kernel-exceedance probability.

    For each (mu_s_sq, sigma_s2) setting, draws difference vectors from
    N(mu_S, 2 sigma_S2 I), evaluates the Gaussian kernel of the difference,
    and compares the empirical exceedance frequency against
    ``kernel_exceed_prob`` at 3 binomial standard errors per eta.
    """
    rng = np.random.default_rng(seed)
    results = []
    all_ok = True
    for setting in settings:
        mu_sq = float(setting["mu_s_sq"])
        s2 = float(setting["sigma_s2"])
        mu = np.zeros(d)
        mu[0] = np.sqrt(mu_sq)  # isotropy: only the norm matters
        xi = mu + np.sqrt(2.0 * s2) * rng.standard_normal((n_draws, d))
        kvals = np.exp(-np.sum(xi * xi, axis=1) / (2.0 * sigma_kernel**2))
        for eta in etas:
            pred = kernel_exceed_prob(eta, sigma_kernel, s2, mu, d)
            emp = float(np.mean(kvals > eta))
            se = np.sqrt(max(pred * (1.0 - pred), 1e-12) / n_draws)
            ok = abs(emp - pred) <= 3.0 * se
            all_ok = all_ok and ok
            results.append(
                {
                    "mu_s_sq": mu_sq,
                    "sigma_s2": s2,
                    "eta": eta,
                    "predicted": pred,
                    "empirical": emp,
                    "abs_dev_se": float(abs(emp - pred) / se),
                    "ok": bool(ok),
                }
            )
    return {"n_draws": n_draws, "cases": results, "passed": bool(all_ok)}
