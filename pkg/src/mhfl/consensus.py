"""Linear consensus inside a cluster and the flooded divergence estimate."""
from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from .network import ClusterTopology, Mode


def run_consensus(topology: ClusterTopology, stacked: np.ndarray, rounds: int) -> np.ndarray:
    """Apply ``z <- V z`` ``rounds`` times to the stacked (n x M) node states."""
    Z = np.asarray(stacked, dtype=float)
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if Z.ndim != 2 or Z.shape[0] != topology.n:
        raise ValueError(f"stacked shape {Z.shape} does not match {topology.n} nodes")
    if rounds == 0 or topology.n == 1:
        return Z.copy()
    if topology.mode is not Mode.LUT or topology.weight_matrix is None:
        raise ValueError("consensus needs a LUT topology with a weight matrix")
    V = topology.weight_matrix
    for _ in range(rounds):
        Z = V @ Z
    return Z


def consensus_error(result_row: np.ndarray, stacked: np.ndarray) -> float:
    """Distance of one post-consensus row from the pre-consensus average."""
    return float(np.linalg.norm(np.asarray(result_row) - np.asarray(stacked).mean(axis=0)))


def error_radius(lam: float, rounds: int, n: int, divergence: float) -> float:
    """Per-node worst-case distance ``lam^rounds * sqrt(n) * divergence``."""
    return float(lam ** rounds * np.sqrt(n) * divergence)


def flood_extrema(topology: ClusterTopology, values: np.ndarray, rounds: int | None = None):
    """Each node repeatedly keeps the max/min of its own and neighbours' values."""
    hi = np.asarray(values, dtype=float).copy()
    lo = hi.copy()
    adj = topology.adjacency
    rounds = topology.diameter if rounds is None else rounds
    for _ in range(rounds):
        nb_hi = np.where(adj, hi[None, :], -np.inf).max(axis=1)
        nb_lo = np.where(adj, lo[None, :], np.inf).min(axis=1)
        hi = np.maximum(hi, nb_hi)
        lo = np.minimum(lo, nb_lo)
    return hi, lo


def estimate_divergence(topology: ClusterTopology, per_node_norms: np.ndarray) -> float:
    """Flooded ``max - min`` of the node norms, read at node 0."""
    norms = np.asarray(per_node_norms, dtype=float)
    if norms.size <= 1:
        return 0.0
    hi, lo = flood_extrema(topology, norms)
    return float(hi[0] - lo[0])


def true_divergence(stacked: np.ndarray) -> float:
    """Largest pairwise distance between rows."""
    Z = np.asarray(stacked, dtype=float)
    if Z.shape[0] <= 1:
        return 0.0
    return float(pdist(Z).max())
