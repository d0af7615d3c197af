"""Multi-stage hybrid training loop.

One global round: broadcast ``w``; every leaf takes a local gradient step and
scales the result by its sample count; each layer, bottom-up, either sums its
children (EUT) or runs D2D consensus and forwards one uniformly sampled child
scaled by the cluster size (LUT); the server divides by the data count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .consensus import estimate_divergence, run_consensus, true_divergence
from .control import (
    GradNormEstimator,
    NetConsts,
    PolicyConfig,
    fixed_theta,
    layer_sigmas,
    theta_from_sigma,
)
from .data import Dataset, Partition
from .model import LossSpec, Model, accuracy, local_gradient
from .network import (
    ClusterTopology,
    Mode,
    NetworkHierarchy,
    eut_topology,
    generate_rgg_topology,
)
from .sampling import ActiveSet, ClusterSampling, all_active


class ScheduleError(ValueError):
    pass


@dataclass
class TopologyConfig:
    radius_m: Union[float, Sequence[float]] = 40.0  # one value, or one per layer 1..L
    disc_radius_m: float = 100.0
    d: Optional[float] = None
    static: bool = False
    lambda_scale: float = 1.0
    mode: Union[str, Sequence[str]] = "LUT"  # one value, or one per layer 1..L
    lut_probability: Optional[float] = None   # per-round Bernoulli switch
    max_attempts: int = 20000

    def radius(self, layer: int) -> float:
        if np.isscalar(self.radius_m):
            return float(self.radius_m)
        return float(self.radius_m[layer - 1])

    def layer_mode(self, layer: int) -> Mode:
        m = self.mode if isinstance(self.mode, str) else self.mode[layer - 1]
        return Mode(m.upper())


@dataclass(frozen=True)
class ParamShare:
    pass


@dataclass(frozen=True)
class GradShareDecayingStep:
    alpha: float
    lam_step: float

    def step(self, k: int) -> float:
        return self.alpha / (k + self.lam_step)


@dataclass(frozen=True)
class GradShareConstant:
    beta: float

    def step(self, k: int) -> float:
        return self.beta


Variant = Union[ParamShare, GradShareDecayingStep, GradShareConstant]


@dataclass
class ClusterRecord:
    layer: int
    index: int
    size: int
    mode: Mode
    active: bool
    theta: int = 0
    lam: float = 0.0
    upsilon: float = 0.0
    upsilon_hat: float = 0.0
    c_norm: float = 0.0
    edges: int = 0
    diameter: int = 0
    sampled: int = -1

    @property
    def xi_term(self) -> float:
        """``|C|^3 lam^(2 theta) ups^2`` for active LUT clusters, else 0."""
        if not self.active or self.mode is not Mode.LUT:
            return 0.0
        return self.size ** 3 * self.lam ** (2 * self.theta) * self.upsilon ** 2


@dataclass
class GlobalRound:
    k: int
    w_in: np.ndarray
    w_out: np.ndarray
    exact: np.ndarray
    clusters: list[ClusterRecord]
    agg_error: float
    loss: float
    acc: float
    d_s: int
    num_params: int
    adaptive: bool
    sigma: Optional[list[float]] = None
    grad_norm_est: Optional[float] = None
    step: float = 0.0

    @property
    def xi(self) -> float:
        return float(sum(c.xi_term for c in self.clusters))

    def theta_mean(self, layer: int) -> float:
        vals = [c.theta for c in self.clusters
                if c.layer == layer and c.active and c.mode is Mode.LUT]
        return float(np.mean(vals)) if vals else 0.0

    def theta_mean_all(self) -> float:
        vals = [c.theta for c in self.clusters if c.active and c.mode is Mode.LUT]
        return float(np.mean(vals)) if vals else 0.0


@dataclass
class Simulation:
    """Everything fixed for a run: network, leaf data, model and policy."""
    h: NetworkHierarchy
    leaf_X: list[np.ndarray]
    leaf_y: list[np.ndarray]
    model: Model
    loss_spec: LossSpec
    policy: PolicyConfig
    topo: TopologyConfig = field(default_factory=TopologyConfig)
    seed: int = 0
    beta: Optional[float] = None
    f0_gap: Optional[float] = None
    grad_seed_scale: float = 1.0
    X_all: np.ndarray = field(init=False, repr=False)
    y_all: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.beta is None:
            self.beta = 1.0 / self.loss_spec.eta
        if len(self.leaf_X) != self.h.num_leaves:
            raise ValueError("one data block per leaf required")
        if self.h.data_counts is None:
            self.h = self.h.with_data([len(y) for y in self.leaf_y])
        self.X_all = np.vstack(self.leaf_X)
        self.y_all = np.concatenate(self.leaf_y)
        self._topo_cache: dict = {}
        errs = self.policy.validate(self.loss_spec.mu, self.loss_spec.eta)
        if errs:
            raise ScheduleError("; ".join(errs))

    @classmethod
    def from_partition(cls, h: NetworkHierarchy, ds: Dataset, part: Partition,
                       loss_spec: LossSpec, policy: PolicyConfig, **kw) -> "Simulation":
        if part.n_leaves != h.num_leaves:
            raise ValueError(f"partition has {part.n_leaves} nodes, network {h.num_leaves} leaves")
        model = loss_spec.build(ds.num_features, ds.num_classes)
        return cls(
            h.with_data(part.counts),
            [ds.features[a] for a in part.assignment],
            [ds.labels[a] for a in part.assignment],
            model, loss_spec, policy, **kw,
        )

    @property
    def D(self) -> int:
        return self.h.total_data

    @property
    def consts(self) -> NetConsts:
        return NetConsts(float(self.D), self.loss_spec.mu, self.loss_spec.eta,
                         self.h.phi, tuple(self.h.layer_sizes))

    def global_loss(self, w: np.ndarray) -> float:
        return self.model.loss(w, self.X_all, self.y_all)

    def global_grad(self, w: np.ndarray) -> np.ndarray:
        return self.model.grad(w, self.X_all, self.y_all)

    def cluster_mode(self, layer: int, index: int, k: int) -> Mode:
        c = self.h.clusters(layer)[index]
        if c.virtual or c.size == 1:
            return Mode.EUT
        if self.topo.lut_probability is not None:
            rng = np.random.default_rng([self.seed, 5, k, layer, index])
            return Mode.LUT if rng.random() < self.topo.lut_probability else Mode.EUT
        return self.topo.layer_mode(layer)

    def topology(self, layer: int, index: int, k: int) -> ClusterTopology:
        key = (0 if self.topo.static else k, layer, index)
        topo = self._topo_cache.get(key)
        if topo is None:
            c = self.h.clusters(layer)[index]
            rng = np.random.default_rng([self.seed, 1, key[0], layer, index])
            topo = generate_rgg_topology(
                c.size, self.topo.radius(layer), self.topo.disc_radius_m, rng,
                d=self.topo.d, lambda_scale=self.topo.lambda_scale,
                max_attempts=self.topo.max_attempts, node_ids=c.members,
            )
            if self.topo.static:
                self._topo_cache[key] = topo
        return topo


def _relay(sim: Simulation, leaf_values: np.ndarray, k: int, active: ActiveSet,
           sigmas: Optional[list[float]], rng: np.random.Generator):
    """Push scaled leaf values up the tree; returns the server value and records."""
    h = sim.h
    policy = sim.policy
    values = leaf_values
    records = []
    for j in range(h.depth, 0, -1):
        clusters = h.clusters(j)
        up = np.zeros((h.layers[j - 1].size, values.shape[1]))
        for c in clusters:
            mode = sim.cluster_mode(j, c.index, k)
            is_active = bool(active.active[j - 1][c.parent])
            rec = ClusterRecord(j, c.index, c.size, mode, is_active)
            records.append(rec)
            if not is_active:
                continue
            stack = values[list(c.members)]
            if mode is Mode.EUT:
                up[c.parent] = stack.sum(axis=0)
                continue
            topo = sim.topology(j, c.index, k)
            rec.lam = topo.lambda_bound
            rec.edges = topo.num_edges
            rec.diameter = topo.diameter
            rec.upsilon = true_divergence(stack)
            rec.upsilon_hat = estimate_divergence(topo, np.linalg.norm(stack, axis=1))
            if sigmas is None:
                rec.theta = fixed_theta(policy, j)
            else:
                ups = rec.upsilon if policy.oracle_divergence else rec.upsilon_hat
                rec.theta = theta_from_sigma(c.size, rec.lam, ups, sigmas[j - 1],
                                             policy.chi, policy.theta_cap)
            mixed = run_consensus(topo, stack, rec.theta)
            pick = int(rng.integers(c.size))
            rec.sampled = pick
            rec.c_norm = float(np.linalg.norm(mixed[pick] - stack.mean(axis=0)))
            up[c.parent] = c.size * mixed[pick]
        values = up
    return values[0], records


def check_variant(variant: Variant, loss_spec: LossSpec) -> None:
    if isinstance(variant, GradShareDecayingStep):
        errs = []
        if not variant.alpha > 1.0 / loss_spec.mu:
            errs.append(f"alpha={variant.alpha} must exceed 1/mu={1 / loss_spec.mu}")
        if not variant.lam_step > 1:
            errs.append(f"lam_step={variant.lam_step} must exceed 1")
        beta0 = variant.step(0)
        if not beta0 <= 1.0 / loss_spec.eta:
            errs.append(f"initial step alpha/lam_step={beta0} exceeds 1/eta={1 / loss_spec.eta}")
        if errs:
            raise ScheduleError("; ".join(errs))
    elif isinstance(variant, GradShareConstant):
        if variant.beta <= 0:
            raise ScheduleError("step size must be positive")


def mhfl_round(sim: Simulation, w: np.ndarray, k: int,
               variant: Variant = ParamShare(),
               active: Optional[ActiveSet] = None,
               grad_est: Optional[GradNormEstimator] = None,
               rng: Optional[np.random.Generator] = None) -> GlobalRound:
    """Global round ``k`` (1-based) starting from the broadcast model ``w``."""
    h = sim.h
    active = all_active(h) if active is None else active
    rng = np.random.default_rng([sim.seed, 2, k]) if rng is None else rng
    M = w.size
    grad_share = not isinstance(variant, ParamShare)

    leaf_active = active.active[h.depth]
    leaves = np.zeros((h.num_leaves, M))
    for n in np.flatnonzero(leaf_active):
        g = local_gradient(sim.model, w, sim.leaf_X[n], sim.leaf_y[n])
        local = g if grad_share else w - sim.beta * g
        leaves[n] = h.data_counts[n] * local

    grad_norm = None
    sigmas = None
    if sim.policy.adaptive:
        if sim.policy.kind == "B":
            grad_norm = grad_est.current() if grad_est is not None else 0.0
        sigmas = layer_sigmas(sim.policy, sim.consts, grad_norm, sim.f0_gap)

    top, records = _relay(sim, leaves, k, active, sigmas, rng)
    exact_sum = leaves[leaf_active].sum(axis=0)
    d_s = active.d_s
    if grad_share:
        step = variant.step(k - 1)
        w_out = w - step * top / d_s
        exact = w - step * exact_sum / d_s
    else:
        step = sim.beta
        w_out = top / d_s
        exact = exact_sum / d_s
    return GlobalRound(
        k=k, w_in=w, w_out=w_out, exact=exact, clusters=records,
        agg_error=aggregation_error(w_out, exact),
        loss=sim.global_loss(w_out),
        acc=accuracy(sim.model, w_out, sim.X_all, sim.y_all),
        d_s=d_s, num_params=M, adaptive=sim.policy.adaptive,
        sigma=sigmas, grad_norm_est=grad_norm, step=step,
    )


def aggregation_error(w_out, exact) -> float:
    if isinstance(w_out, GlobalRound):
        w_out = w_out.w_out
    return float(np.linalg.norm(np.asarray(w_out) - np.asarray(exact)))


def run_training(sim: Simulation, w0: np.ndarray, K: int,
                 variant: Variant = ParamShare(),
                 sampling: Optional[ClusterSampling] = None) -> list[GlobalRound]:
    check_variant(variant, sim.loss_spec)
    if K < 0:
        raise ValueError("K must be >= 0")
    w = np.array(w0, dtype=float)
    grad_est = None
    if sim.policy.kind == "B":
        beta = sim.beta if isinstance(variant, ParamShare) else variant.step(0)
        grad_est = GradNormEstimator(beta, sim.policy.omega)
        grad_est.seed(np.random.default_rng([sim.seed, 4]), sim.grad_seed_scale)
        grad_est.observe(w)
    rounds = []
    for k in range(1, K + 1):
        active = None
        if sampling is not None and sampling.fraction < 1:
            active = sampling.draw(sim.h, np.random.default_rng([sim.seed, 3, k]))
        rnd = mhfl_round(sim, w, k, variant, active, grad_est)
        rounds.append(rnd)
        w = rnd.w_out
        if grad_est is not None:
            grad_est.observe(w)
    return rounds
