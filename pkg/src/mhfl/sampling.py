"""Per-round activation of a subset of bottom clusters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import NetworkHierarchy


@dataclass
class ActiveSet:
    """Activation state of one round.

    ``active[j]`` flags the nodes of layer ``j`` that lie on a path between an
    engaged bottom cluster and the server.
    """
    active_bottom: np.ndarray  # indices of engaged bottom clusters
    active: list[np.ndarray]
    d_s: int

    def is_active(self, layer: int, node: int) -> bool:
        return bool(self.active[layer][node])

    def cluster_active(self, h: NetworkHierarchy, layer: int, index: int) -> bool:
        """A cluster takes part when its parent does."""
        return bool(self.active[layer - 1][h.clusters(layer)[index].parent])


@dataclass
class ClusterSampling:
    fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("sampling fraction must lie in (0, 1]")

    def draw(self, h: NetworkHierarchy, rng: np.random.Generator) -> ActiveSet:
        return draw_active(h, self.fraction, rng)


def all_active(h: NetworkHierarchy) -> ActiveSet:
    n_bottom = len(h.clusters(h.depth))
    return _closure(h, np.arange(n_bottom))


def draw_active(h: NetworkHierarchy, fraction: float, rng: np.random.Generator) -> ActiveSet:
    if not 0 < fraction <= 1:
        raise ValueError("sampling fraction must lie in (0, 1]")
    n_bottom = len(h.clusters(h.depth))
    if fraction >= 1:
        return all_active(h)
    count = min(n_bottom, math.ceil(fraction * n_bottom - 1e-12))
    chosen = np.sort(rng.choice(n_bottom, size=max(count, 1), replace=False))
    return _closure(h, chosen)


def _closure(h: NetworkHierarchy, bottom: np.ndarray) -> ActiveSet:
    L = h.depth
    active = [np.zeros(layer.size, dtype=bool) for layer in h.layers]
    for ci in bottom:
        active[L][list(h.clusters(L)[ci].members)] = True
    for j in range(L, 0, -1):
        for c in h.clusters(j):
            if active[j][list(c.members)].any():
                active[j - 1][c.parent] = True
    if h.data_counts is None:
        raise ValueError("hierarchy has no data counts")
    d_s = int(h.data_counts[active[L]].sum())
    return ActiveSet(np.asarray(bottom, dtype=int), active, d_s)
