"""Traffic, energy and per-run summaries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .network import Mode, NetworkHierarchy
from .protocol import GlobalRound


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class EnergyModel:
    p_d2d_dbm: float = 10.0
    p_uplink_dbm: float = 24.0
    rate_bps: float = 1e6
    bits_per_param: int = 32
    duplex_factor: int = 2
    delay_s: float = 0.25  # recorded only; no metric depends on it

    def __post_init__(self):
        if not (np.isfinite(self.p_d2d_dbm) and np.isfinite(self.p_uplink_dbm)):
            raise ValueError("transmit powers must be finite")
        if self.rate_bps <= 0:
            raise ValueError("rate must be positive")

    def joules_per_param(self, link: str) -> float:
        dbm = self.p_d2d_dbm if link == "d2d" else self.p_uplink_dbm
        return self.bits_per_param / self.rate_bps * dbm_to_watts(dbm)


@dataclass
class Traffic:
    d2d_params: int = 0
    uplink_params: int = 0
    flood_params: int = 0
    bottom_d2d_params: int = 0
    bottom_uplink_params: int = 0
    per_layer_uplink: dict = field(default_factory=dict)
    per_layer_d2d: dict = field(default_factory=dict)


def round_traffic(rnd: GlobalRound, h: NetworkHierarchy, duplex_factor: int = 2) -> Traffic:
    """Scalar parameters sent during one round, split by link class.

    D2D counts include the divergence flood (two scalars per directed link per
    flood round) whenever an adaptive policy chose the rounds.
    """
    M = rnd.num_params
    t = Traffic()
    for c in rnd.clusters:
        if not c.active:
            continue
        if c.mode is Mode.LUT:
            up = M
            d2d = c.theta * duplex_factor * c.edges * M
            flood = 2 * duplex_factor * c.edges * c.diameter if rnd.adaptive else 0
        else:
            up = c.size * M
            d2d = flood = 0
        t.uplink_params += up
        t.d2d_params += d2d + flood
        t.flood_params += flood
        t.per_layer_uplink[c.layer] = t.per_layer_uplink.get(c.layer, 0) + up
        t.per_layer_d2d[c.layer] = t.per_layer_d2d.get(c.layer, 0) + d2d + flood
        if c.layer == h.depth:
            t.bottom_uplink_params += up
            t.bottom_d2d_params += d2d + flood
    return t


def round_energy(traffic: Traffic, model: EnergyModel) -> float:
    """Joules spent by edge devices (bottom layer transmissions only)."""
    return (traffic.bottom_d2d_params * model.joules_per_param("d2d")
            + traffic.bottom_uplink_params * model.joules_per_param("uplink"))


@dataclass
class TrainRecord:
    k: int
    loss: float
    acc: Optional[float]
    theta_mean: list[float]
    d2d_params: int
    uplink_params: int
    energy_j: float
    agg_err: float
    bound_thm1: Optional[float] = None


def make_records(rounds: Sequence[GlobalRound], h: NetworkHierarchy, energy: EnergyModel,
                 bounds: Optional[Sequence[float]] = None) -> list[TrainRecord]:
    """Per-round records with cumulative traffic and energy."""
    out = []
    d2d = up = 0
    joules = 0.0
    for i, rnd in enumerate(rounds):
        t = round_traffic(rnd, h, energy.duplex_factor)
        d2d += t.d2d_params
        up += t.uplink_params
        joules += round_energy(t, energy)
        out.append(TrainRecord(
            k=rnd.k, loss=rnd.loss, acc=rnd.acc,
            theta_mean=[rnd.theta_mean(j) for j in range(1, h.depth + 1)],
            d2d_params=d2d, uplink_params=up, energy_j=joules,
            agg_err=rnd.agg_error,
            bound_thm1=None if bounds is None else float(bounds[i]),
        ))
    return out


@dataclass
class Summary:
    rounds: int = 0
    final_loss: float = 0.0
    final_acc: float = 0.0
    d2d_params: int = 0
    uplink_params: int = 0
    energy_j: float = 0.0
    target_round: Optional[int] = None
    energy_to_target: Optional[float] = None
    uplink_to_target: Optional[int] = None
    energy_saving: Optional[float] = None
    uplink_saving: Optional[float] = None


def _target_index(records, target_acc=None, target_loss=None) -> Optional[int]:
    for i, r in enumerate(records):
        if target_acc is not None and r.acc is not None and r.acc >= target_acc:
            return i
        if target_acc is None and target_loss is not None and r.loss <= target_loss:
            return i
    return None


def run_summary(records: Sequence[TrainRecord],
                baseline: Optional[Sequence[TrainRecord]] = None,
                target_fraction: float = 0.98) -> Summary:
    """Totals plus savings against a paired baseline at a matched target.

    The target is ``target_fraction`` of the baseline's final accuracy; when
    accuracy is unavailable, a loss within ``2 - target_fraction`` times the
    baseline's final loss is used instead.
    """
    if not records:
        return Summary()
    last = records[-1]
    s = Summary(
        rounds=len(records), final_loss=last.loss, final_acc=last.acc or 0.0,
        d2d_params=last.d2d_params, uplink_params=last.uplink_params, energy_j=last.energy_j,
    )
    if not baseline:
        return s
    ref = baseline[-1]
    if ref.acc is not None and last.acc is not None:
        kw = {"target_acc": target_fraction * ref.acc}
    else:
        kw = {"target_loss": (2.0 - target_fraction) * ref.loss}
    i = _target_index(records, **kw)
    j = _target_index(baseline, **kw)
    if i is None or j is None:
        return s
    s.target_round = records[i].k
    s.energy_to_target = records[i].energy_j
    s.uplink_to_target = records[i].uplink_params
    b_energy, b_up = baseline[j].energy_j, baseline[j].uplink_params
    s.energy_saving = 0.0 if b_energy == 0 else 1.0 - records[i].energy_j / b_energy
    s.uplink_saving = 0.0 if b_up == 0 else 1.0 - records[i].uplink_params / b_up
    return s
