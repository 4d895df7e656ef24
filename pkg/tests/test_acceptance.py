"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned here from the project contract; every expected value
is either computed by an independent oracle inside the test or checked by
Monte Carlo at the stated standard-error bounds. The Gaussian-world theory
checks run on an early-time grid (dt = 0.01 on the default schedule), the
regime in which the fixed-point Gaussian statistics describe the
perturb-then-score estimator; see the README's "timestep grids" note.
"""

import json
import time

import numpy as np
import pytest

from epsdetect.analytic import GaussianWorld
from epsdetect.attacks import AttackConfig, attack, train_classifier
from epsdetect.eps import ScoreSource, TimeGrid, eps_batch
from epsdetect.harness import (
    ExperimentConfig,
    WorldSpec,
    _mmd_stats,
    auroc,
    detect,
    generate_world_data,
    timestep_sweep,
    validate_corollary1,
    validate_theorem1,
)
from epsdetect.mlp import Mlp
from epsdetect.mmd import (
    KernelSpec,
    _deep_criterion_and_grad,
    kernel_eval,
    median_heuristic,
    mmd2_biased,
    mmd2_set,
    train_deep_kernel,
)
from epsdetect.schedule import NoiseSchedule
from epsdetect.scorenet import ScoreNet, TrainConfig, dsm_loss_and_grad, forward, train

SCHED = NoiseSchedule(0.1, 20.0, 1000.0)


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}")


def test_criterion_01_theorem1_verification():
    # Gaussian world, analytic score, d=8, sigma_x^2=1, schedule (0.1,20,1000),
    # T*=20 early-time grid, eps = 0.3*1, N=2e4: (a) natural mean within 3 SE
    # of 0 per component, (b) mean difference within 3 SE of the predicted
    # shift, (c) per-component difference variance within 5% of twice the
    # predicted variance. Runtime <= 60 s single-threaded.
    started = time.perf_counter()
    world = GaussianWorld(mu_x=np.zeros(8), sigma_x2=1.0)
    grid = TimeGrid(t_star=20, dt=0.01)
    out = validate_theorem1(
        world, SCHED, grid, np.full(8, 0.3), n_draws=20000, seed=1, var_rtol=0.05
    )
    elapsed = time.perf_counter() - started
    ok = out["passed"] and elapsed <= 60.0
    report(
        "criterion-1 theorem-1 verification",
        ok,
        f"mean {out['natural_mean_max_abs_se']:.2f} SE, shift {out['shift_max_abs_se']:.2f} SE, "
        f"var dev {out['variance_max_rel_dev']:.3%}, {elapsed:.1f}s",
    )
    assert out["mean_zero_ok"]
    assert out["shift_ok"]
    assert out["variance_ok"]
    assert elapsed <= 60.0


def test_criterion_02_corollary1_verification():
    # Empirical frequency of k(S(x), S(y_hat)) > eta over N=1e5 simulated
    # difference vectors matches the noncentral chi-square formula within
    # 3 SE for eta in {0.2, 0.5, 0.8} at two (||mu_S||^2, sigma_S^2) settings.
    started = time.perf_counter()
    out = validate_corollary1(
        d=8,
        sigma_kernel=1.0,
        settings=[{"mu_s_sq": 0.5, "sigma_s2": 0.125}, {"mu_s_sq": 0.3, "sigma_s2": 0.1}],
        etas=(0.2, 0.5, 0.8),
        n_draws=100000,
        seed=11,
    )
    elapsed = time.perf_counter() - started
    worst = max(c["abs_dev_se"] for c in out["cases"])
    ok = out["passed"] and elapsed <= 30.0
    report(
        "criterion-2 corollary-1 verification",
        ok,
        f"6 cases, worst dev {worst:.2f} SE, {elapsed:.1f}s",
    )
    assert out["passed"]
    assert elapsed <= 30.0


def test_criterion_03_oracle_equivalence():
    # MMD estimators against brute-force loop expansions (n, m <= 5, 1e-12)
    # and AUROC against the brute-force pairwise count, exactly, on 200
    # random score configurations including ties.
    rng = np.random.default_rng(12)
    worst_mmd = 0.0
    for trial in range(40):
        d = int(rng.integers(1, 5))
        spec = KernelSpec.gaussian(float(rng.uniform(0.4, 2.5)))
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        refs = rng.normal(size=(n, d))
        y = rng.normal(size=d)
        b1 = (
            sum(kernel_eval(spec, refs[i], refs[j]) for i in range(n) for j in range(n)) / n**2
            - 2.0 / n * sum(kernel_eval(spec, refs[i], y) for i in range(n))
            + kernel_eval(spec, y, y)
        )
        worst_mmd = max(worst_mmd, abs(mmd2_biased(spec, refs, y) - b1))
        ys = rng.normal(size=(m, d))
        b2 = (
            sum(kernel_eval(spec, refs[i], refs[j]) for i in range(n) for j in range(n)) / n**2
            + sum(kernel_eval(spec, ys[i], ys[j]) for i in range(m) for j in range(m)) / m**2
            - 2.0 / (n * m)
            * sum(kernel_eval(spec, refs[i], ys[j]) for i in range(n) for j in range(m))
        )
        worst_mmd = max(worst_mmd, abs(mmd2_set(spec, refs, ys) - b2))

    auroc_exact = True
    for trial in range(200):
        n = int(rng.integers(1, 15))
        m = int(rng.integers(1, 15))
        nat = np.round(rng.normal(size=n), 1)  # quantized to force ties
        adv = np.round(rng.normal(size=m) + 0.2, 1)
        brute = (
            sum(1.0 for a in adv for b in nat if a > b)
            + 0.5 * sum(1.0 for a in adv for b in nat if a == b)
        ) / (n * m)
        auroc_exact = auroc_exact and (auroc(nat, adv) == brute)

    ok = worst_mmd < 1e-12 and auroc_exact
    report(
        "criterion-3 oracle equivalence",
        ok,
        f"max MMD deviation {worst_mmd:.2e}, AUROC exact on 200 configs: {auroc_exact}",
    )
    assert worst_mmd < 1e-12
    assert auroc_exact


def test_criterion_04_gradient_fidelity():
    # DSM loss gradient and deep-kernel power-criterion gradient both match
    # central finite differences within 1e-4 relative on >= 20 random
    # coordinates each, in double precision.
    net = ScoreNet.create(d=3, hidden=(10, 8), rng=np.random.default_rng(13))
    batch = np.random.default_rng(14).normal(size=(24, 3))
    ts = [1.0, 4.0, 9.0, 16.0]

    def dsm_at(params):
        probe = ScoreNet(widths=net.widths, time_embed=net.time_embed, params=params)
        return dsm_loss_and_grad(probe, SCHED, batch, ts, np.random.default_rng(777))[0]

    _, grad = dsm_loss_and_grad(net, SCHED, batch, ts, np.random.default_rng(777))
    rng = np.random.default_rng(15)
    worst_dsm = 0.0
    for i in rng.choice(net.params.size, size=24, replace=False):
        h = 1e-5 * max(1.0, abs(net.params[i]))
        up, dn = net.params.copy(), net.params.copy()
        up[i] += h
        dn[i] -= h
        fd = (dsm_at(up) - dsm_at(dn)) / (2.0 * h)
        worst_dsm = max(worst_dsm, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6))

    mlp = Mlp((3, 8, 4))
    fw = mlp.init(rng)
    rho, lsphi, lsq = 0.1, 0.2, -0.1
    x = rng.normal(size=(10, 3))
    y = rng.normal(size=(10, 3)) + 0.6
    _, g_fw, g_rho, g_lsphi, g_lsq = _deep_criterion_and_grad(mlp, fw, rho, lsphi, lsq, x, y)

    def j_at(fw_, rho_, lsphi_, lsq_):
        return _deep_criterion_and_grad(mlp, fw_, rho_, lsphi_, lsq_, x, y)[0]

    worst_kernel = 0.0
    for i in rng.choice(fw.size, size=20, replace=False):
        h = 1e-5 * max(1.0, abs(fw[i]))
        up, dn = fw.copy(), fw.copy()
        up[i] += h
        dn[i] -= h
        fd = (j_at(up, rho, lsphi, lsq) - j_at(dn, rho, lsphi, lsq)) / (2.0 * h)
        worst_kernel = max(worst_kernel, abs(fd - g_fw[i]) / max(abs(fd), abs(g_fw[i]), 1e-6))
    for got, fd in [
        (g_rho, (j_at(fw, rho + 1e-6, lsphi, lsq) - j_at(fw, rho - 1e-6, lsphi, lsq)) / 2e-6),
        (g_lsphi, (j_at(fw, rho, lsphi + 1e-6, lsq) - j_at(fw, rho, lsphi - 1e-6, lsq)) / 2e-6),
        (g_lsq, (j_at(fw, rho, lsphi, lsq + 1e-6) - j_at(fw, rho, lsphi, lsq - 1e-6)) / 2e-6),
    ]:
        worst_kernel = max(worst_kernel, abs(fd - got) / max(abs(fd), abs(got), 1e-6))

    ok = worst_dsm <= 1e-4 and worst_kernel <= 1e-4
    report(
        "criterion-4 gradient fidelity",
        ok,
        f"worst relative deviation: dsm {worst_dsm:.2e}, power criterion {worst_kernel:.2e}",
    )
    assert worst_dsm <= 1e-4
    assert worst_kernel <= 1e-4


def test_criterion_05_learned_score_fidelity():
    # Default score net on 1e4 samples from a d=2 Gaussian world: mean
    # relative L2 error vs the analytic score over a held-out (x, t) grid,
    # t in {1..20}, at most 0.15. Runtime <= 5 min single-threaded.
    started = time.perf_counter()
    world = GaussianWorld(mu_x=np.array([1.0, -0.5]), sigma_x2=1.0)
    data = world.sample(10000, np.random.default_rng(314))
    net = ScoreNet.create(d=2, rng=np.random.default_rng(1))
    grid = np.arange(1.0, 21.0)
    net, _ = train(
        net, data, SCHED, TrainConfig(learning_rate=1e-3, batch_size=128, iterations=5000, seed=2),
        timesteps=grid,
    )
    eval_rng = np.random.default_rng(99)
    held_out = world.sample(500, eval_rng)
    errs = []
    for t in grid:
        x_t = SCHED.perturb(held_out, t, eval_rng)
        s_hat = forward(net, x_t, t, t_scale=SCHED.t_max)
        s_true = -(x_t - SCHED.gamma(t) * world.mu_x) / (
            SCHED.gamma(t) ** 2 * world.sigma_x2 + SCHED.sigma2(t)
        )
        errs.append(float(np.sqrt(np.sum((s_hat - s_true) ** 2) / np.sum(s_true**2))))
    mean_err = float(np.mean(errs))
    elapsed = time.perf_counter() - started
    ok = mean_err <= 0.15 and elapsed <= 300.0
    report(
        "criterion-5 learned-score fidelity",
        ok,
        f"mean relative L2 error {mean_err:.4f} (bar 0.15), {elapsed:.1f}s",
    )
    assert mean_err <= 0.15
    assert elapsed <= 300.0


def test_criterion_06_schedule_identity_and_moments():
    # gamma^2 + sigma2 = 1 within 1e-12 on 1e3 random (schedule, t) pairs;
    # perturb moment checks at 3 SE with N=1e5.
    rng = np.random.default_rng(16)
    worst = 0.0
    for _ in range(1000):
        bmin = float(rng.uniform(0.0, 5.0))
        sched = NoiseSchedule(bmin, bmin + float(rng.uniform(0.0, 30.0)), float(rng.uniform(1.0, 2000.0)))
        t = float(rng.uniform(0.0, sched.t_max))
        worst = max(worst, abs(sched.gamma(t) ** 2 + sched.sigma2(t) - 1.0))

    n = 100000
    x0 = np.array([1.0, 1.0])
    t = 100.0
    draws = SCHED.perturb(np.tile(x0, (n, 1)), t, np.random.default_rng(17))
    g, s2 = SCHED.gamma(t), SCHED.sigma2(t)
    mean_dev = np.abs(draws.mean(axis=0) - g * x0) / np.sqrt(s2 / n)
    var_dev = np.abs(draws.var(axis=0, ddof=1) - s2) / (s2 * np.sqrt(2.0 / (n - 1)))
    ok = worst < 1e-12 and float(mean_dev.max()) <= 3.0 and float(var_dev.max()) <= 3.0
    report(
        "criterion-6 schedule identity",
        ok,
        f"identity dev {worst:.2e}, moment devs {mean_dev.max():.2f}/{var_dev.max():.2f} SE",
    )
    assert worst < 1e-12
    assert float(mean_dev.max()) <= 3.0
    assert float(var_dev.max()) <= 3.0


def test_criterion_07_end_to_end_detection():
    # Learned score on a 2-class d=2 world; deep kernel trained only on
    # FGSM / FGSM-l2 EPS data (eps = 1/255 of the feature range); detection
    # of held-out PGD and BIM at eps = 4/255 of the range (5 steps, step
    # eps/5) must beat the raw-vector MMD AUROC by >= 0.05, with every
    # crafted point inside the eps-ball to 1e-9. Runtime <= 10 min.
    started = time.perf_counter()
    seed = 20230
    world = WorldSpec(means=[[-1.5, 0.0], [1.5, 0.0]], scales=[0.5, 0.04], bounds=(-3.0, 3.0))
    grid = TimeGrid(t_star=20, dt=0.05)
    eps_detect = 4.0 / 255.0 * world.span
    eps_seen = 1.0 / 255.0 * world.span

    ss = np.random.SeedSequence(seed).spawn(4)
    rng_data = np.random.default_rng(ss[0])
    rng_attack = np.random.default_rng(ss[1])
    clf_x, clf_y = generate_world_data(world, [500, 500], rng_data)
    score_x, _ = generate_world_data(world, [2000, 2000], rng_data)
    refs_x, _ = generate_world_data(world, [250, 250], rng_data)
    nat_x, _ = generate_world_data(world, [250, 250], rng_data)
    ker_nat_x, _ = generate_world_data(world, [500, 500], rng_data)
    atk_x, atk_y = generate_world_data(world, [250, 250], rng_data)
    ker_atk_x, ker_atk_y = generate_world_data(world, [250, 250], rng_data)

    clf = train_classifier(clf_x, clf_y, seed=seed)
    net = ScoreNet.create(d=2, rng=np.random.default_rng(ss[2]))
    net, _ = train(
        net, score_x, SCHED,
        TrainConfig(learning_rate=1e-3, batch_size=128, iterations=10000, seed=seed + 1),
        timesteps=grid.times(),
    )
    src = ScoreSource.learned(net, SCHED)

    fgsm = attack(clf, ker_atk_x, ker_atk_y,
                  AttackConfig(method="fgsm", norm="linf", epsilon=eps_seen), rng_attack)
    fgsm_l2 = attack(clf, ker_atk_x, ker_atk_y,
                     AttackConfig(method="fgsm", norm="l2", epsilon=eps_seen), rng_attack)
    e_refs = eps_batch(src, refs_x, grid, 11)
    e_nat = eps_batch(src, nat_x, grid, 12)
    e_ker_nat = eps_batch(src, ker_nat_x, grid, 13)
    e_ker_adv = eps_batch(src, np.vstack([fgsm, fgsm_l2]), grid, 14)
    kern = train_deep_kernel(
        e_ker_nat, e_ker_adv,
        TrainConfig(learning_rate=1e-3, batch_size=128, iterations=1500, seed=seed + 2),
    )

    raw_spec = KernelSpec.gaussian(median_heuristic(refs_x))
    details = []
    all_ok = True
    for method, eps_seed in (("pgd", 15), ("bim", 16)):
        adv = attack(clf, atk_x, atk_y,
                     AttackConfig(method=method, norm="linf", epsilon=eps_detect), rng_attack)
        ball_dev = float(np.abs(adv - atk_x).max())
        assert ball_dev <= eps_detect + 1e-9
        e_adv = eps_batch(src, adv, grid, eps_seed)
        deep_auc = auroc(_mmd_stats(kern, e_refs, e_nat), _mmd_stats(kern, e_refs, e_adv))
        raw_auc = auroc(_mmd_stats(raw_spec, refs_x, nat_x), _mmd_stats(raw_spec, refs_x, adv))
        all_ok = all_ok and (deep_auc >= raw_auc + 0.05)
        details.append(f"{method} eps-mmd {deep_auc:.3f} vs raw-mmd {raw_auc:.3f}")
        assert deep_auc >= raw_auc + 0.05
    elapsed = time.perf_counter() - started
    report(
        "criterion-7 end-to-end detection",
        all_ok and elapsed <= 600.0,
        "; ".join(details) + f", {elapsed:.0f}s",
    )
    assert elapsed <= 600.0


SWEEP_CFG = {
    "world": {"type": "gaussian", "mu_x": [0.0, 0.0], "sigma_x2": 0.0025},
    "schedule": {"beta_min": 0.1, "beta_max": 20.0, "t_max": 1000.0},
    "score": {"type": "analytic"},
    "grid": {"t_star": 20, "dt": 0.1},
    "detector": "eps-mmd-gaussian",
    "epsilon_shift": [0.15, 0.15],
    "n_ref": 500,
    "n_nat": 500,
    "n_adv": 500,
    "seed": 2026,
}


def test_criterion_08_timestep_stability():
    # Across T in {5,10,20,50,100}: the eps-mmd AUROC varies less than the
    # single-score-norm AUROC across the same timesteps, and the best-T
    # eps-mmd AUROC strictly exceeds its T=5 value (rise then plateau).
    t_values = [5, 10, 20, 50, 100]
    rows = timestep_sweep(ExperimentConfig(raw=dict(SWEEP_CFG)), t_values)
    eps_aucs = [r[2] for r in rows if r[0] == "eps-mmd-gaussian"]
    sn_aucs = [r[2] for r in rows if r[0] == "single-score-norm"]
    eps_std = float(np.std(eps_aucs))
    sn_std = float(np.std(sn_aucs))
    best_idx = int(np.argmax(eps_aucs))
    rise = eps_aucs[best_idx] - eps_aucs[0]
    ok = eps_std < sn_std and rise > 0.0
    report(
        "criterion-8 timestep stability",
        ok,
        f"eps-mmd std {eps_std:.4f} < s-n std {sn_std:.4f}; "
        f"best T={t_values[best_idx]} rise {rise:+.4f} over T=5",
    )
    assert eps_std < sn_std
    assert rise > 0.0


def test_criterion_09_attack_intensity_monotonicity():
    # eps-mmd AUROC nondecreasing in the attack budget over {1..8}/255
    # scaled budgets, within one standard error per adjacent pair.
    scale = 8.0
    aucs = []
    for k in range(1, 9):
        eps = scale * k / 255.0 / np.sqrt(2.0)
        cfg = dict(SWEEP_CFG, epsilon_shift=[eps, eps])
        aucs.append(detect(ExperimentConfig(raw=cfg)).auroc)
    aucs = np.asarray(aucs)
    se = float(np.sqrt(np.maximum(aucs * (1.0 - aucs), 1e-6) / 500).max())
    ok = bool(np.all(np.diff(aucs) >= -se))
    report(
        "criterion-9 attack-intensity monotonicity",
        ok,
        f"AUROC {np.round(aucs, 3).tolist()}, min adjacent diff {np.diff(aucs).min():+.4f}, "
        f"1 SE {se:.4f}",
    )
    assert ok


def test_criterion_10_cli_determinism(tmp_path):
    # Repeating any CLI run with the same config and seed produces
    # bit-identical CSV/JSON outputs.
    from epsdetect.cli import main

    detect_cfg = dict(SWEEP_CFG, n_ref=80, n_nat=50, n_adv=50, epsilon_shift=[0.2, 0.2])
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(detect_cfg))
    outs = []
    for tag in ("a", "b"):
        csv_p = tmp_path / f"{tag}.csv"
        json_p = tmp_path / f"{tag}.json"
        sweep_p = tmp_path / f"{tag}_sweep.csv"
        assert main(["detect", "--config", str(cfg_path), "--out-csv", str(csv_p),
                     "--out-json", str(json_p)]) == 0
        assert main(["sweep", "--config", str(cfg_path), "--T", "3,6", "--out", str(sweep_p)]) == 0
        outs.append((csv_p.read_bytes(), json_p.read_bytes(), sweep_p.read_bytes()))
    ok = outs[0] == outs[1]
    report("criterion-10 CLI determinism", ok, "detect CSV/JSON and sweep CSV bit-identical")
    assert ok
