import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhfl.control import InfeasibleError, NetConsts, PolicyConfig, contraction, sigma_star_a
from mhfl.model import reference_optimum
from mhfl.protocol import run_training
from mhfl.theory import (
    GapRegime,
    LinearRegime,
    corollary_iters,
    prop1_asymptotic_gap,
    prop3_bound,
    prop3_gamma,
    theorem1_bound,
    theorem1_curve,
)

from conftest import make_sim

CONSTS = NetConsts(D=5000.0, mu=0.1, eta=10.0, phi=31, layer_sizes=(1, 5, 25, 125))


def test_exact_aggregation_reduces_to_gd_rate():
    for k in (0, 1, 7, 50):
        assert theorem1_bound([0.0] * k, k, CONSTS, 3.0) == pytest.approx(0.99 ** k * 3.0)


def test_bound_needs_enough_rounds():
    with pytest.raises(ValueError):
        theorem1_bound([1.0], 2, CONSTS, 1.0)


def test_single_round_noise_term():
    xi = 4.0e6
    expected = 0.99 * 2.0 + 10.0 * 31 / (2 * 5000.0 ** 2) * xi
    assert theorem1_bound([xi], 1, CONSTS, 2.0) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e8), min_size=1, max_size=30), st.floats(0.01, 10))
def test_curve_matches_pointwise_bound(xi, f0):
    curve = theorem1_curve(xi, CONSTS, f0)
    for k in range(1, len(xi) + 1):
        assert curve[k - 1] == pytest.approx(theorem1_bound(xi, k, CONSTS, f0), rel=1e-9, abs=1e-12)


def test_asymptotic_gap_of_long_horizon_sigma_is_target():
    sig = sigma_star_a(CONSTS, 0.4, 100_000, 2.0)
    assert prop1_asymptotic_gap(sig, CONSTS) == pytest.approx(0.4, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.0, 0.9))
def test_gap_regime_iteration_count_is_tight(eps_frac, gap_frac):
    f0 = 2.0
    eps = eps_frac * f0
    scale = CONSTS.eta ** 2 * CONSTS.phi / (2 * CONSTS.mu * CONSTS.D ** 2)
    gap_target = gap_frac * eps
    sig = [gap_target / (scale * CONSTS.layer_sizes[0])] + [0.0, 0.0]
    gap = prop1_asymptotic_gap(sig, CONSTS)
    k = corollary_iters(GapRegime(tuple(sig)), eps, f0, CONSTS)
    at = lambda n: contraction(CONSTS.mu, CONSTS.eta, n) * (f0 - gap) + gap
    assert at(k) <= eps * (1 + 1e-9)
    if k > 0:
        assert at(k - 1) > eps * (1 - 1e-9)


def test_linear_regime_iteration_count():
    k = corollary_iters(LinearRegime(0.01), 0.1, 1.0, CONSTS)
    assert 0.99 ** k <= 0.1 < 0.99 ** (k - 1)
    assert k == math.ceil(math.log(0.1) / math.log(0.99))


def test_iteration_edge_cases():
    assert corollary_iters(LinearRegime(0.01), 2.0, 1.0, CONSTS) == 0
    assert corollary_iters(GapRegime((0.0, 0.0, 0.0)), 1.0, 1.0, CONSTS) == 0
    with pytest.raises(InfeasibleError):
        corollary_iters(LinearRegime(1.5), 0.1, 1.0, CONSTS)
    big = sigma_star_a(CONSTS, 0.5, 100_000, 2.0)
    with pytest.raises(InfeasibleError):
        corollary_iters(GapRegime(tuple(big)), 0.4, 2.0, CONSTS)


def test_decaying_step_bound_covers_start():
    f0 = 3.0
    g = prop3_gamma(20.0, 200.0, [0.0] * 3, CONSTS, f0)
    assert g == pytest.approx(200.0 * f0)
    assert prop3_bound(20.0, 200.0, [0.0] * 3, CONSTS, f0, 0) == pytest.approx(f0)
    ks = np.arange(5)
    np.testing.assert_allclose(prop3_bound(20.0, 200.0, [0.0] * 3, CONSTS, f0, ks), g / (ks + 200.0))
    with pytest.raises(ValueError):
        prop3_gamma(5.0, 200.0, [0.0] * 3, CONSTS, f0)


def test_realized_gap_below_bound_on_small_run():
    sim = make_sim(policy=PolicyConfig("fixed", theta=2), radius=(70.0,))
    w0 = np.zeros(sim.model.param_count)
    _, fstar = reference_optimum(sim.model, sim.X_all, sim.y_all, sim.beta, 1000)
    f0 = sim.global_loss(w0) - fstar
    rounds = run_training(sim, w0, 15)
    curve = theorem1_curve(rounds, sim.consts, f0)
    for r, b in zip(rounds, curve):
        assert r.loss - fstar <= b + 1e-9
