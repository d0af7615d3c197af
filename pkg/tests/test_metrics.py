import numpy as np
import pytest

from mhfl.control import PolicyConfig
from mhfl.metrics import (
    EnergyModel,
    TrainRecord,
    dbm_to_watts,
    make_records,
    round_energy,
    round_traffic,
    run_summary,
)
from mhfl.network import HierarchySpec, Mode, build_hierarchy
from mhfl.protocol import ClusterRecord, GlobalRound, run_training

from conftest import make_sim


def fake_round(clusters, M=10, adaptive=True):
    z = np.zeros(M)
    return GlobalRound(1, z, z, z, clusters, 0.0, 1.0, 0.5, 25, M, adaptive)


def test_dbm_conversion():
    assert dbm_to_watts(30) == pytest.approx(1.0)
    assert dbm_to_watts(10) == pytest.approx(0.01)
    assert dbm_to_watts(24) == pytest.approx(0.2512, rel=1e-3)


def test_energy_per_parameter():
    em = EnergyModel()
    assert em.joules_per_param("d2d") == pytest.approx(32 / 1e6 * 0.01)
    assert em.joules_per_param("uplink") == pytest.approx(32 / 1e6 * 10 ** -0.6)


def test_energy_model_rejects_bad_values():
    with pytest.raises(ValueError):
        EnergyModel(p_d2d_dbm=float("nan"))
    with pytest.raises(ValueError):
        EnergyModel(rate_bps=0)


def test_hand_counted_traffic():
    h = build_hierarchy(HierarchySpec(cluster_sizes=[[5]]))
    lut = ClusterRecord(1, 0, 5, Mode.LUT, True, theta=3, edges=6, diameter=2)
    t = round_traffic(fake_round([lut]), h)
    assert t.uplink_params == 10
    assert t.flood_params == 2 * 2 * 6 * 2
    assert t.d2d_params == 3 * 2 * 6 * 10 + 48
    assert t.bottom_uplink_params == 10
    fixed = round_traffic(fake_round([lut], adaptive=False), h)
    assert fixed.d2d_params == 360 and fixed.flood_params == 0


def test_eut_and_inactive_traffic():
    h = build_hierarchy(HierarchySpec(cluster_sizes=[[5]]))
    eut = ClusterRecord(1, 0, 5, Mode.EUT, True)
    assert round_traffic(fake_round([eut]), h).uplink_params == 50
    off = ClusterRecord(1, 0, 5, Mode.LUT, False, theta=9, edges=6)
    t = round_traffic(fake_round([off]), h)
    assert t.uplink_params == t.d2d_params == 0
    assert round_energy(t, EnergyModel()) == 0.0


def test_records_are_cumulative():
    sim = make_sim(policy=PolicyConfig("fixed", theta=2), radius=(70.0,))
    rounds = run_training(sim, np.zeros(sim.model.param_count), 4)
    recs = make_records(rounds, sim.h, EnergyModel())
    assert [r.k for r in recs] == [1, 2, 3, 4]
    for a, b in zip(recs, recs[1:]):
        assert b.uplink_params > a.uplink_params
        assert b.energy_j > a.energy_j
    # 5 bottom LUT clusters and one at the top each send one model per round
    assert recs[0].uplink_params == 6 * sim.model.param_count
    assert len(recs[0].theta_mean) == 2


def test_lut_cuts_uplink_against_eut():
    w0 = np.zeros(make_sim().model.param_count)
    em = EnergyModel()
    lut = make_sim(policy=PolicyConfig("fixed", theta=3), radius=(70.0,))
    eut = make_sim(mode="EUT")
    a = make_records(run_training(lut, w0, 3), lut.h, em)
    b = make_records(run_training(eut, w0, 3), eut.h, em)
    assert a[-1].uplink_params < b[-1].uplink_params
    assert a[-1].energy_j < b[-1].energy_j


def rec(k, acc, up, e):
    return TrainRecord(k, 1.0 / k, acc, [0.0], 0, up, e, 0.0)


def test_summary_matched_target():
    base = [rec(1, 0.5, 100, 10.0), rec(2, 0.9, 200, 20.0), rec(3, 1.0, 300, 30.0)]
    cand = [rec(1, 0.99, 10, 1.0), rec(2, 1.0, 20, 2.0)]
    s = run_summary(cand, base)
    assert s.target_round == 1
    # both reach 0.98 at their first qualifying round
    assert s.uplink_saving == pytest.approx(1 - 10 / 300)
    assert s.energy_saving == pytest.approx(1 - 1.0 / 30.0)


def test_summary_without_baseline_or_records():
    assert run_summary([]).rounds == 0
    s = run_summary([rec(1, 0.5, 7, 1.5)])
    assert s.uplink_params == 7 and s.energy_saving is None


def test_summary_falls_back_to_loss():
    base = [TrainRecord(k, 1.0 / k, None, [0.0], 0, 100 * k, float(k), 0.0) for k in (1, 2, 4)]
    cand = [TrainRecord(k, 1.0 / k, None, [0.0], 0, 10 * k, 0.1 * k, 0.0) for k in (1, 2, 4)]
    s = run_summary(cand, base)
    assert s.target_round == 4
    assert s.uplink_saving == pytest.approx(0.9)
