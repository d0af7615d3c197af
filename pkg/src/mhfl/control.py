"""Choosing the number of D2D rounds per cluster.

Every policy reduces to a per-layer tolerance ``sigma_j`` fed into one branch
rule: run just enough rounds that ``lam^(2 theta) |C|^3 ups^2 <= chi * sigma``,
or none at all when the cluster already meets the tolerance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

log = logging.getLogger(__name__)

POLICY_KINDS = ("fixed", "A", "B", "psi")


@dataclass
class PolicyConfig:
    kind: str = "fixed"
    theta: Optional[int] = None               # fixed
    theta_per_layer: Optional[list[int]] = None
    sigma: Optional[list[float]] = None       # A: explicit sigma_j, j = 1..L
    epsilon: Optional[float] = None           # A: derive sigma from (epsilon, kappa); B: derive delta
    epsilon_rel: Optional[float] = None       # epsilon as a fraction of the F0 gap
    kappa: Optional[int] = None
    delta: Optional[float] = None             # B
    omega: float = 2.0                        # B
    psi: Optional[float] = None               # psi heuristic
    chi: float = 1.0
    theta_cap: int = 500
    oracle_divergence: bool = False  # control on the exact pairwise divergence (simulation only)

    def validate(self, mu: Optional[float] = None, eta: Optional[float] = None) -> list[str]:
        errs = []
        if self.kind not in POLICY_KINDS:
            errs.append(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.chi < 1:
            errs.append("chi must be >= 1")
        if self.theta_cap < 0:
            errs.append("theta_cap must be >= 0")
        if self.kind == "fixed":
            if self.theta is None and self.theta_per_layer is None:
                errs.append("fixed policy needs theta")
            if self.theta is not None and self.theta < 0:
                errs.append("theta must be >= 0")
            if self.theta_per_layer is not None and any(t < 0 for t in self.theta_per_layer):
                errs.append("theta_per_layer entries must be >= 0")
        elif self.kind == "A":
            if self.sigma is None and (not self._has_target() or self.kappa is None):
                errs.append("policy A needs sigma or (epsilon, kappa)")
            if self.sigma is not None and any(s < 0 for s in self.sigma):
                errs.append("sigma entries must be >= 0")
        elif self.kind == "B":
            if self.omega <= 1:
                errs.append("omega must be > 1")
            if self.delta is None and (not self._has_target() or self.kappa is None):
                errs.append("policy B needs delta or (epsilon, kappa)")
            if self.delta is not None:
                if self.delta <= 0:
                    errs.append("delta must be > 0")
                elif mu is not None and eta is not None and self.delta > mu / eta:
                    errs.append(f"delta must be <= mu/eta = {mu / eta}")
        elif self.kind == "psi":
            if self.psi is None or self.psi <= 0:
                errs.append("psi must be > 0")
        return errs

    def _has_target(self) -> bool:
        return self.epsilon is not None or self.epsilon_rel is not None

    def target(self, f0_gap: Optional[float]) -> float:
        if self.epsilon is not None:
            return self.epsilon
        if f0_gap is None:
            raise ValueError("a relative epsilon needs the F0 gap")
        return self.epsilon_rel * f0_gap

    @property
    def adaptive(self) -> bool:
        return self.kind != "fixed"


def theta_from_sigma(
    size: int,
    lam: float,
    upsilon_hat: float,
    sigma: float,
    chi: float = 1.0,
    cap: int = 500,
) -> int:
    """Branch rule shared by every adaptive policy."""
    if size <= 1 or upsilon_hat <= 0:
        return 0
    target = chi * sigma
    threshold = size ** 3 * upsilon_hat ** 2
    if not target <= threshold:
        return 0
    if target <= 0 or lam >= 1:
        return cap
    if lam <= 0:
        return min(1, cap)
    x = (math.log(target) - 2.0 * math.log(size ** 1.5 * upsilon_hat)) / (2.0 * math.log(lam))
    theta = max(0, math.ceil(x - 1e-9))
    while theta < cap and lam ** (2 * theta) * threshold > target:
        theta += 1
    return min(theta, cap)


def theta_policy_a(size: int, lam: float, upsilon_hat: float, sigma_j: float,
                   chi: float = 1.0, cap: int = 500) -> int:
    return theta_from_sigma(size, lam, upsilon_hat, sigma_j, chi, cap)


def contraction(mu: float, eta: float, k) -> float:
    """``(1 - mu/eta)^k`` evaluated stably."""
    return float(np.exp(np.asarray(k, dtype=float) * math.log1p(-mu / eta)))


@dataclass(frozen=True)
class NetConsts:
    """Constants the server broadcasts to every parent."""
    D: float
    mu: float
    eta: float
    phi: int
    layer_sizes: tuple[int, ...]  # N_0 .. N_L

    @property
    def depth(self) -> int:
        return len(self.layer_sizes) - 1

    def n_above(self, j: int) -> int:
        """N_{j-1}: number of parents (clusters) feeding layer ``j``."""
        return self.layer_sizes[j - 1]


class InfeasibleError(ValueError):
    pass


def sigma_star_a(consts: NetConsts, epsilon: float, kappa: int, f0_gap: float) -> list[float]:
    """Equalised per-layer tolerances meeting ``epsilon`` after ``kappa`` rounds."""
    r = contraction(consts.mu, consts.eta, kappa)
    lo = r * f0_gap
    if not (lo <= epsilon < f0_gap):
        raise InfeasibleError(
            f"epsilon={epsilon} outside the feasible range [{lo}, {f0_gap})"
        )
    if kappa < 1:
        raise InfeasibleError("kappa must be >= 1")
    scale = consts.eta ** 2 * consts.phi / (2.0 * consts.mu * consts.D ** 2)
    num = epsilon - lo
    return [
        num / ((1.0 - r) * scale * consts.n_above(j) * consts.depth)
        for j in range(1, consts.depth + 1)
    ]


def sigma_policy_b(consts: NetConsts, delta: float, grad_norm_est: float) -> list[float]:
    if not 0 < delta <= consts.mu / consts.eta * (1 + 1e-12):
        raise ValueError(f"delta must lie in (0, mu/eta], got {delta}")
    coef = consts.D ** 2 * consts.mu * max(consts.mu - delta * consts.eta, 0.0) / (
        consts.eta ** 4 * consts.phi * consts.depth
    )
    return [coef * grad_norm_est ** 2 / consts.n_above(j) for j in range(1, consts.depth + 1)]


def sigma_psi(consts: NetConsts, psi: float) -> list[float]:
    if psi <= 0:
        raise ValueError("psi must be > 0")
    return [
        psi * consts.D ** 2 / (consts.phi * consts.n_above(j) * consts.depth)
        for j in range(1, consts.depth + 1)
    ]


def theta_policy_b(size: int, lam: float, upsilon_hat: float, grad_norm_est: float,
                   delta: float, consts: NetConsts, layer: int,
                   chi: float = 1.0, cap: int = 500) -> int:
    sigma = sigma_policy_b(consts, delta, grad_norm_est)[layer - 1]
    return theta_from_sigma(size, lam, upsilon_hat, sigma, chi, cap)


def theta_psi(size: int, lam: float, upsilon_hat: float, psi: float,
              consts: NetConsts, layer: int, chi: float = 1.0, cap: int = 500) -> int:
    sigma = sigma_psi(consts, psi)[layer - 1]
    return theta_from_sigma(size, lam, upsilon_hat, sigma, chi, cap)


def delta_for_target(mu: float, eta: float, epsilon: float, kappa: int, f0_gap: float) -> float:
    """Linear rate that reaches ``epsilon`` after ``kappa`` rounds, clamped to mu/eta."""
    if not (0 < epsilon < f0_gap) or kappa < 1:
        raise InfeasibleError("need 0 < epsilon < F0 gap and kappa >= 1")
    delta = 1.0 - (epsilon / f0_gap) ** (1.0 / kappa)
    if delta > mu / eta:
        log.warning("delta %.4g exceeds mu/eta=%.4g; clamping", delta, mu / eta)
        delta = mu / eta
    return delta


@dataclass
class GradNormEstimator:
    """Gradient norm estimate from the last two broadcast models."""
    beta: float
    omega: float = 2.0
    last_w: Optional[np.ndarray] = None
    last_norm_estimate: float = 0.0
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.omega <= 1:
            raise ValueError("omega must be > 1")

    def seed(self, rng: np.random.Generator, scale: float = 1.0) -> float:
        self.last_norm_estimate = float(scale * (0.5 + rng.random()))
        return self.last_norm_estimate

    def observe(self, w: np.ndarray) -> None:
        self.history.append(np.array(w, dtype=float))
        del self.history[:-2]
        self.last_w = self.history[-1]

    def current(self) -> float:
        """Estimate from the two most recent models, or the seeded value."""
        if len(self.history) == 2:
            self.last_norm_estimate = estimate_grad_norm(
                self.history[0], self.history[1], self.beta, self.omega
            )
        return self.last_norm_estimate


def estimate_grad_norm(w_prev: np.ndarray, w_cur: np.ndarray, beta: float, omega: float) -> float:
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if omega <= 1:
        raise ValueError("omega must be > 1")
    return float(np.linalg.norm(np.asarray(w_prev) - np.asarray(w_cur)) / (beta * omega))


def layer_sigmas(policy: PolicyConfig, consts: NetConsts,
                 grad_norm_est: Optional[float] = None,
                 f0_gap: Optional[float] = None) -> Optional[list[float]]:
    """Per-layer tolerances for the current round, ``None`` for fixed policies."""
    if policy.kind == "fixed":
        return None
    if policy.kind == "A":
        if policy.sigma is not None:
            if len(policy.sigma) == 1:
                return list(policy.sigma) * consts.depth
            if len(policy.sigma) != consts.depth:
                raise ValueError(f"need {consts.depth} sigma values")
            return list(policy.sigma)
        if f0_gap is None:
            raise ValueError("policy A from (epsilon, kappa) needs the F0 gap")
        return sigma_star_a(consts, policy.target(f0_gap), policy.kappa, f0_gap)
    if policy.kind == "B":
        delta = resolve_delta(policy, consts, f0_gap)
        return sigma_policy_b(consts, delta, grad_norm_est or 0.0)
    return sigma_psi(consts, policy.psi)


def resolve_delta(policy: PolicyConfig, consts: NetConsts, f0_gap: Optional[float]) -> float:
    if policy.delta is not None:
        return policy.delta
    if f0_gap is None:
        raise ValueError("policy B from (epsilon, kappa) needs the F0 gap")
    return delta_for_target(consts.mu, consts.eta, policy.target(f0_gap), policy.kappa, f0_gap)


def fixed_theta(policy: PolicyConfig, layer: int) -> int:
    if policy.theta_per_layer is not None:
        return int(policy.theta_per_layer[layer - 1])
    if policy.theta is None:
        raise ValueError("fixed policy without theta")
    return int(policy.theta)


def spearman_trend(values: Sequence[float]) -> float:
    """Rank correlation of a series with its index."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 or np.all(v == v[0]):
        return 0.0
    return float(spearmanr(np.arange(v.size), v).statistic)
