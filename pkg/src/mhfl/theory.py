"""Closed-form convergence bounds evaluated on recorded runs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .control import InfeasibleError, NetConsts, contraction


def _xi_series(rounds_or_xi) -> np.ndarray:
    vals = []
    for r in rounds_or_xi:
        vals.append(float(r) if np.isscalar(r) else float(r.xi))
    return np.asarray(vals, dtype=float)


def theorem1_bound(rounds_or_xi: Sequence, k: int, consts: NetConsts, f0_gap: float) -> float:
    """Optimality gap bound after ``k`` rounds.

    ``rounds_or_xi`` holds, per round 1..k, either a ``GlobalRound`` or its
    consensus term ``sum |C|^3 lam^(2 theta) ups^2`` over LUT clusters.
    """
    xi = _xi_series(rounds_or_xi)
    if k < 0:
        raise ValueError("k must be >= 0")
    if len(xi) < k:
        raise ValueError(f"need diagnostics for {k} rounds, got {len(xi)}")
    mu, eta = consts.mu, consts.eta
    head = contraction(mu, eta, k) * f0_gap
    if k == 0:
        return head
    t = np.arange(k)
    damp = np.exp(t * math.log1p(-mu / eta))
    # round k - t contributes with weight (1 - mu/eta)^t
    tail = float(np.sum(damp * xi[k - 1 - t]))
    return head + eta * consts.phi / (2.0 * consts.D ** 2) * tail


def theorem1_curve(rounds_or_xi: Sequence, consts: NetConsts, f0_gap: float) -> np.ndarray:
    """Bound for k = 1..len(rounds)."""
    xi = _xi_series(rounds_or_xi)
    r = 1.0 - consts.mu / consts.eta
    scale = consts.eta * consts.phi / (2.0 * consts.D ** 2)
    out, acc = [], 0.0
    for k in range(1, len(xi) + 1):
        acc = r * acc + xi[k - 1]
        out.append(contraction(consts.mu, consts.eta, k) * f0_gap + scale * acc)
    return np.asarray(out)


def aggregation_error_bound(xi: float, phi: int, D: float) -> float:
    """Squared aggregation error bound ``phi / D^2 * xi``."""
    return phi / D ** 2 * xi


def weighted_sigma_sum(sigmas: Sequence[float], consts: NetConsts) -> float:
    """``sum_j sigma_{j+1} N_j`` for j = 0..L-1."""
    if len(sigmas) != consts.depth:
        raise ValueError(f"need {consts.depth} sigma values")
    return float(sum(s * consts.layer_sizes[j] for j, s in enumerate(sigmas)))


def prop1_asymptotic_gap(sigmas: Sequence[float], consts: NetConsts) -> float:
    return consts.eta ** 2 * consts.phi / (2.0 * consts.mu * consts.D ** 2) * \
        weighted_sigma_sum(sigmas, consts)


def corollary1_rhs(epsilon: float, kappa: int, f0_gap: float, consts: NetConsts) -> float:
    """Largest admissible ``sum_j sigma_{j+1} N_j`` meeting ``epsilon`` at ``kappa``."""
    r = contraction(consts.mu, consts.eta, kappa)
    scale = consts.eta ** 2 * consts.phi / (2.0 * consts.mu * consts.D ** 2)
    return (epsilon - r * f0_gap) / ((1.0 - r) * scale)


@dataclass(frozen=True)
class GapRegime:
    sigmas: tuple[float, ...]


@dataclass(frozen=True)
class LinearRegime:
    delta: float


def _ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


def corollary_iters(kind: Union[GapRegime, LinearRegime], epsilon: float,
                    f0_gap: float, consts: NetConsts) -> int:
    """Sufficient number of global rounds to reach ``epsilon``."""
    if epsilon >= f0_gap:
        return 0
    if isinstance(kind, LinearRegime):
        if not 0 < kind.delta < 1:
            raise InfeasibleError("delta must lie in (0, 1)")
        if epsilon <= 0:
            raise InfeasibleError("epsilon must be positive")
        return max(0, _ceil((math.log(epsilon) - math.log(f0_gap)) / math.log1p(-kind.delta)))
    gap = prop1_asymptotic_gap(kind.sigmas, consts)
    if not epsilon > gap:
        raise InfeasibleError(f"epsilon={epsilon} does not exceed the asymptotic gap {gap}")
    ratio = (math.log(epsilon - gap) - math.log(f0_gap - gap)) / math.log1p(-consts.mu / consts.eta)
    return max(0, _ceil(ratio))


def prop3_gamma(alpha: float, lam_step: float, sigmas: Sequence[float],
                consts: NetConsts, f0_gap: float) -> float:
    if not alpha > 1.0 / consts.mu:
        raise ValueError(f"alpha must exceed 1/mu = {1 / consts.mu}")
    if not lam_step > 1:
        raise ValueError("lam_step must exceed 1")
    noise = consts.eta * alpha ** 2 * consts.phi * weighted_sigma_sum(sigmas, consts) / (
        2.0 * consts.D ** 2 * (alpha * consts.mu - 1.0)
    )
    return max(lam_step * f0_gap, noise)


def prop3_bound(alpha: float, lam_step: float, sigmas: Sequence[float],
                consts: NetConsts, f0_gap: float, k: Union[int, Iterable[int]]):
    gamma = prop3_gamma(alpha, lam_step, sigmas, consts, f0_gap)
    if np.isscalar(k):
        return gamma / (k + lam_step)
    return np.array([gamma / (kk + lam_step) for kk in k])
