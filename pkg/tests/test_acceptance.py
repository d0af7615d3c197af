"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are
repeated in the terminal summary.
"""
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from mhfl.cli import load_config, run_experiment
from mhfl.consensus import consensus_error, run_consensus, true_divergence
from mhfl.control import PolicyConfig, layer_sigmas
from mhfl.data import NonIID
from mhfl.metrics import EnergyModel, round_traffic
from mhfl.model import centralized_gd, reference_optimum
from mhfl.network import generate_rgg_topology
from mhfl.protocol import GradShareDecayingStep, ScheduleError, check_variant, run_training
from mhfl.theory import GapRegime, corollary_iters, prop3_gamma, theorem1_curve

from conftest import ROOT_CFG, make_sim, report

pytestmark = pytest.mark.acceptance

NET125 = dict(leaves=125, samples=5000, radius=(60.0, 50.0, 40.0))


def fstar_of(sim, steps):
    return reference_optimum(sim.model, sim.X_all, sim.y_all, sim.beta, steps)[1]


def test_criterion_1_eut_matches_centralized_gd():
    t0 = time.perf_counter()
    sim = make_sim(leaves=25, mode="EUT")
    w0 = 0.3 * np.random.default_rng(0).standard_normal(sim.model.param_count)
    rounds = run_training(sim, w0, 30)
    traj = centralized_gd(sim.model, sim.X_all, sim.y_all, 30, sim.beta, w0=w0, keep_weights=True)
    worst = max(np.linalg.norm(r.w_out - w) for r, w in zip(rounds, traj.weights[1:]))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5
    report(1, ok, f"max |dw|={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_2_long_consensus_matches_eut():
    t0 = time.perf_counter()
    lut = make_sim(leaves=25, policy=PolicyConfig("fixed", theta=500), radius=(300.0,))
    eut = make_sim(leaves=25, mode="EUT")
    w0 = 0.3 * np.random.default_rng(1).standard_normal(lut.model.param_count)
    a = run_training(lut, w0, 20)
    b = run_training(eut, w0, 20)
    lam = max(c.lam for r in a for c in r.clusters if c.active)
    worst = max(np.linalg.norm(x.w_out - y.w_out) for x, y in zip(a, b))
    elapsed = time.perf_counter() - t0
    ok = lam <= 0.6 and worst < 1e-6 and elapsed < 30
    report(2, ok, f"max lambda={lam:.3f} max |dw|={worst:.2e} time={elapsed:.2f}s")
    assert ok


def test_criterion_3_consensus_error_bound():
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(500):
        n = int(rng.integers(2, 11))
        topo = generate_rgg_topology(n, float(rng.uniform(50.0, 200.0)), 100.0, rng)
        theta = int(rng.integers(0, 40))
        Z = rng.standard_normal((n, int(rng.integers(1, 30)))) * rng.uniform(0.01, 100.0)
        out = run_consensus(topo, Z, theta)
        ups = true_divergence(Z)
        bound = topo.lambda_bound ** (2 * theta) * n * ups ** 2
        for row in out:
            if consensus_error(row, Z) ** 2 > bound * (1 + 1e-9) + 1e-24:
                violations += 1
    report(3, violations == 0, f"violations={violations}/500 instances")
    assert violations == 0


def test_criterion_4_psi_guarantee():
    violations, worst, thetas = 0, 0.0, []
    for psi in (1e3, 1e5, 1e7):
        sim = make_sim(**NET125, kind="mlp", mu=0.01, policy=PolicyConfig("psi", psi=psi))
        w0 = sim.model.init_params(np.random.default_rng([0, 6]))
        for r in run_training(sim, w0, 50):
            e2 = r.agg_error ** 2
            worst = max(worst, e2 / psi)
            violations += e2 > psi
            thetas.append(r.theta_mean_all())
    report(4, violations == 0,
           f"violations={violations}/150 rounds max e^2/psi={worst:.2e} mean theta={np.mean(thetas):.2f}")
    assert violations == 0


def test_criterion_5_theorem1_dominates():
    violations, tightest = 0, np.inf
    for theta in (2, 5, 15):
        sim = make_sim(**NET125, policy=PolicyConfig("fixed", theta=theta))
        w0 = np.zeros(sim.model.param_count)
        fstar = fstar_of(sim, 300)
        rounds = run_training(sim, w0, 30)
        curve = theorem1_curve(rounds, sim.consts, sim.global_loss(w0) - fstar)
        for r, b in zip(rounds, curve):
            gap = r.loss - fstar
            violations += gap > b
            tightest = min(tightest, b - gap)
    report(5, violations == 0, f"violations={violations}/90 min slack={tightest:.3e}")
    assert violations == 0


def test_criterion_6_fixed_theta_reproduction():
    common = dict(NET125, scheme=NonIID(1), eta=4.0)
    gaps = {}
    for name, kw in (("eut", dict(mode="EUT")),
                     ("15", dict(policy=PolicyConfig("fixed", theta=15))),
                     ("1", dict(policy=PolicyConfig("fixed", theta=1)))):
        sim = make_sim(**common, **kw)
        fstar = fstar_of(sim, 300)
        gaps[name] = run_training(sim, np.zeros(sim.model.param_count), 30)[-1].loss - fstar
    rel15 = abs(gaps["15"] - gaps["eut"]) / gaps["eut"]
    ratio = gaps["1"] / gaps["15"]
    ok = rel15 <= 0.05 and ratio >= 2
    report(6, ok, f"theta=15 vs EUT {100 * rel15:.2f}% theta=1/theta=15 {ratio:.2f}x")
    assert ok


def test_criterion_7_corollary_duality():
    violations, details = 0, []
    kappa = 30
    for seed in range(5):
        sim = make_sim(**NET125, seed=seed, policy=PolicyConfig("A", epsilon_rel=0.8, kappa=kappa))
        w0 = np.zeros(sim.model.param_count)
        fstar = fstar_of(sim, 10 * kappa)
        sim.f0_gap = sim.global_loss(w0) - fstar
        eps = 0.8 * sim.f0_gap
        gap = run_training(sim, w0, kappa)[-1].loss - fstar
        violations += gap > eps
        sigmas = layer_sigmas(sim.policy, sim.consts, None, sim.f0_gap)
        k2 = corollary_iters(GapRegime(tuple(sigmas)), eps, sim.f0_gap, sim.consts)
        gap2 = run_training(sim, w0, k2)[-1].loss - fstar if k2 else sim.f0_gap
        violations += gap2 > eps
        details.append(f"{k2}")
    report(7, violations == 0, f"violations={violations}/10 derived kappa per seed={','.join(details)}")
    assert violations == 0


def _prop3_run(lam_step, seeds, leaves=25):
    alpha = 2.0 / 0.1
    variant = GradShareDecayingStep(alpha, lam_step)
    checks = {5: [], 10: [], 20: []}
    gammas = []
    for seed in seeds:
        sim = make_sim(leaves=leaves, seed=seed, radius=(70.0,),
                       policy=PolicyConfig("A", epsilon_rel=0.9, kappa=30))
        check_variant(variant, sim.loss_spec)
        w0 = np.zeros(sim.model.param_count)
        fstar = fstar_of(sim, 300)
        sim.f0_gap = sim.global_loss(w0) - fstar
        rounds = run_training(sim, w0, 20, variant)
        gammas.append(prop3_gamma(alpha, lam_step, rounds[0].sigma, sim.consts, sim.f0_gap))
        for k in checks:
            checks[k].append(rounds[k - 1].loss - fstar)
    gamma = float(np.mean(gammas))
    return {k: (float(np.mean(v)), gamma / (k + lam_step)) for k, v in checks.items()}


@pytest.mark.xfail(raises=ScheduleError, strict=True,
                   reason="alpha=2/mu with lam_step=2 gives a first step of 1/mu, above 1/eta")
def test_criterion_8_decaying_step_bound():
    try:
        res = _prop3_run(2.0, range(20))
    except ScheduleError as exc:
        report(8, False, f"schedule rejected: {exc}")
        raise
    ok = all(m <= b for m, b in res.values())
    report(8, ok, " ".join(f"k={k} mean={m:.3e} bound={b:.3e}" for k, (m, b) in res.items()))
    assert ok


def test_criterion_8_diagnostic_with_admissible_schedule():
    res = _prop3_run(200.0, range(20))
    ok = all(m <= b for m, b in res.values())
    line = " ".join(f"k={k} mean={m:.3e} bound={b:.3e}" for k, (m, b) in res.items())
    report("8 (diagnostic, lam_step=200)", ok, line)
    assert ok


def test_criterion_9_resource_metrics(tmp_path):
    sim = make_sim(**NET125, policy=PolicyConfig("fixed", theta=3))
    rounds = run_training(sim, np.zeros(sim.model.param_count), 2)
    n_clusters = sum(len(sim.h.clusters(j)) for j in range(1, sim.h.depth + 1))
    M = sim.model.param_count
    per_round = [round_traffic(r, sim.h).uplink_params for r in rounds]
    em = EnergyModel()
    ratio = em.joules_per_param("uplink") / em.joules_per_param("d2d")

    cfg = load_config(ROOT_CFG)
    lut = run_experiment(cfg, tmp_path / "lut")
    eut = run_experiment(cfg, tmp_path / "eut", baseline=True)
    e_lut = [r.records[-1].energy_j for r in lut]
    e_eut = [r.records[-1].energy_j for r in eut]

    ok_up = all(u == n_clusters * M for u in per_round)
    ok_ratio = abs(ratio - 10 ** 1.4) <= 1e-9
    ok_energy = all(a < b for a, b in zip(e_lut, e_eut))
    ok = ok_up and ok_ratio and ok_energy
    saving = 100 * (1 - np.sum(e_lut) / np.sum(e_eut))
    report(9, ok, f"uplink/round={per_round[0]} (= {n_clusters}*{M}) "
                  f"ratio err={abs(ratio - 10 ** 1.4):.1e} energy saving={saving:.1f}%")
    assert ok


def _trend(policy, seed):
    sim = make_sim(**NET125, seed=seed, policy=policy)
    w0 = 0.5 * np.random.default_rng([seed, 6]).standard_normal(sim.model.param_count)
    fstar = fstar_of(sim, 300)
    sim.f0_gap = sim.global_loss(w0) - fstar
    th = [r.theta_mean_all() for r in run_training(sim, w0, 30)]
    return spearmanr(np.arange(1, 31), th).statistic


def test_criterion_10_theta_trends():
    a = [_trend(PolicyConfig("A", epsilon_rel=0.7401, kappa=30), s) for s in range(5)]
    b = [_trend(PolicyConfig("B", delta=0.005), s) for s in range(5)]
    ok = all(x < 0 for x in a) and all(x > 0 for x in b)
    report(10, ok, "A rho=" + ",".join(f"{x:+.2f}" for x in a)
           + " B rho=" + ",".join(f"{x:+.2f}" for x in b))
    assert ok
