"""FogL augmented network graph: layered clusters, D2D topologies and consensus weights.

Layer 0 holds the server, layer ``L`` the edge devices. Every node above the
bottom layer owns exactly one child cluster in the layer immediately below it.
Node ids are positions within a layer; clusters of a layer are ordered by the
id of their parent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterator, Optional, Sequence

import networkx as nx
import numpy as np


class HierarchyError(ValueError):
    """Raised for hierarchy specs that cannot form a valid augmented graph."""


class TopologyError(RuntimeError):
    """Raised when a connected D2D topology cannot be produced."""


class Mode(str, Enum):
    LUT = "LUT"  # D2D consensus, parent samples one child
    EUT = "EUT"  # every child uploads to the parent


# --------------------------------------------------------------------------- #
# Hierarchy
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Cluster:
    layer: int
    index: int
    members: tuple[int, ...]
    parent: int
    virtual: bool = False

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Layer:
    index: int
    clusters: tuple[Cluster, ...]
    size: int
    virtual_nodes: frozenset[int] = frozenset()


@dataclass
class HierarchySpec:
    """Description of the network before augmentation.

    Exactly one of the two forms is used:

    * ``cluster_sizes``: top-down list, one entry per layer below the server,
      each entry the list of cluster sizes of that layer. Cluster ``i`` of
      layer ``j + 1`` hangs below node ``i`` of layer ``j``.
    * ``tree``: nested lists where a node is a list of its child clusters and
      a cluster is a list of nodes; a leaf is ``[]``. The root is the server.
      Irregular trees (several clusters per parent, leaves at different
      depths) are normalised by inserting virtual nodes.
    """

    cluster_sizes: Optional[list[list[int]]] = None
    tree: Optional[list] = None

    @classmethod
    def regular(cls, num_leaves: int, group_size: int) -> "HierarchySpec":
        """Leaves grouped by ``group_size`` repeatedly until one cluster is left."""
        if num_leaves < 1 or group_size < 1:
            raise HierarchyError("num_leaves and group_size must be >= 1")
        layers: list[list[int]] = []
        count = num_leaves
        while True:
            if count <= group_size:
                layers.append([count])
                break
            if count % group_size:
                raise HierarchyError(
                    f"{count} nodes cannot be split into clusters of {group_size}"
                )
            layers.append([group_size] * (count // group_size))
            count //= group_size
            if group_size == 1:
                raise HierarchyError("group_size 1 never reduces to a single cluster")
        return cls(cluster_sizes=layers[::-1])


@dataclass
class NetworkHierarchy:
    layers: list[Layer]
    data_counts: Optional[np.ndarray] = None

    @property
    def depth(self) -> int:
        """Number of layers below the server, |L|."""
        return len(self.layers) - 1

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.size for layer in self.layers]

    @property
    def phi(self) -> int:
        """Total number of nodes above the bottom layer (server included)."""
        return int(sum(self.layer_sizes[:-1]))

    @property
    def num_leaves(self) -> int:
        return self.layers[-1].size

    @property
    def total_data(self) -> int:
        if self.data_counts is None:
            raise HierarchyError("no data counts attached to the hierarchy")
        return int(np.sum(self.data_counts))

    def clusters(self, layer: int) -> tuple[Cluster, ...]:
        return self.layers[layer].clusters

    def iter_clusters(self) -> Iterator[Cluster]:
        for layer in self.layers[1:]:
            yield from layer.clusters

    def child_cluster(self, layer: int, node: int) -> Cluster:
        """Cluster below ``node`` of ``layer`` (layer < depth)."""
        return self.layers[layer + 1].clusters[node]

    @cached_property
    def _parent_maps(self) -> list[np.ndarray]:
        maps = [np.zeros(0, dtype=int)]
        for layer in self.layers[1:]:
            parent = np.empty(layer.size, dtype=int)
            for c in layer.clusters:
                parent[list(c.members)] = c.parent
            maps.append(parent)
        return maps

    @cached_property
    def _cluster_maps(self) -> list[np.ndarray]:
        maps = [np.zeros(1, dtype=int)]
        for layer in self.layers[1:]:
            idx = np.empty(layer.size, dtype=int)
            for c in layer.clusters:
                idx[list(c.members)] = c.index
            maps.append(idx)
        return maps

    def parent_of(self, layer: int, node: int) -> int:
        return int(self._parent_maps[layer][node])

    def cluster_of(self, layer: int, node: int) -> Cluster:
        return self.layers[layer].clusters[int(self._cluster_maps[layer][node])]

    def leaves_below(self, layer: int, node: int) -> list[int]:
        nodes = [node]
        for j in range(layer, self.depth):
            nodes = [m for n in nodes for m in self.child_cluster(j, n).members]
        return nodes

    def with_data(self, counts: Sequence[int]) -> "NetworkHierarchy":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_leaves,):
            raise HierarchyError(
                f"expected {self.num_leaves} leaf data counts, got {counts.shape}"
            )
        if np.any(counts < 1):
            raise HierarchyError("every leaf needs at least one sample")
        return NetworkHierarchy(self.layers, counts)


class _TreeNode:
    __slots__ = ("virtual", "clusters")

    def __init__(self, clusters: list, virtual: bool = False):
        self.virtual = virtual
        self.clusters: list[list[_TreeNode]] = clusters


def _parse_tree(obj) -> _TreeNode:
    if not isinstance(obj, (list, tuple)):
        raise HierarchyError(f"tree node must be a list of clusters, got {obj!r}")
    clusters = []
    for cluster in obj:
        if not isinstance(cluster, (list, tuple)) or len(cluster) == 0:
            raise HierarchyError("every cluster must be a non-empty list of nodes")
        clusters.append([_parse_tree(child) for child in cluster])
    return _TreeNode(clusters)


def _split_shared_parents(node: _TreeNode) -> None:
    if len(node.clusters) > 1:
        node.clusters = [[_TreeNode([c], virtual=True) for c in node.clusters]]
    for cluster in node.clusters:
        for child in cluster:
            _split_shared_parents(child)


def _leaf_depth(node: _TreeNode, depth: int = 0) -> int:
    if not node.clusters:
        return depth
    return max(_leaf_depth(c, depth + 1) for cl in node.clusters for c in cl)


def _pad_leaves(node: _TreeNode, depth: int, target: int) -> None:
    for cluster in node.clusters:
        for pos, child in enumerate(cluster):
            if not child.clusters and depth + 1 < target:
                chain = child
                for _ in range(target - depth - 1):
                    chain = _TreeNode([[chain]], virtual=True)
                cluster[pos] = chain
            else:
                _pad_leaves(child, depth + 1, target)


def _split(nodes: list, sizes: list[int]) -> list[list]:
    groups, start = [], 0
    for s in sizes:
        groups.append(nodes[start:start + int(s)])
        start += int(s)
    return groups


def _tree_from_sizes(cluster_sizes: list[list[int]]) -> _TreeNode:
    if not cluster_sizes:
        raise HierarchyError("at least one layer below the server is required")
    for j, sizes in enumerate(cluster_sizes):
        if not sizes or any(int(s) < 1 for s in sizes):
            raise HierarchyError(f"layer {j + 1}: cluster sizes must be >= 1")
    for j in range(len(cluster_sizes) - 1):
        n_nodes = sum(int(s) for s in cluster_sizes[j])
        n_below = len(cluster_sizes[j + 1])
        if n_nodes != n_below:
            raise HierarchyError(
                f"layer {j + 1} has {n_nodes} nodes but layer {j + 2} has "
                f"{n_below} clusters"
            )
    nodes = [_TreeNode([]) for _ in range(sum(int(s) for s in cluster_sizes[-1]))]
    for j in range(len(cluster_sizes) - 1, 0, -1):
        nodes = [_TreeNode([g]) for g in _split(nodes, cluster_sizes[j])]
    # several clusters directly below the server get a virtual layer later
    return _TreeNode(_split(nodes, cluster_sizes[0]))


def build_hierarchy(spec: HierarchySpec) -> NetworkHierarchy:
    """Build the augmented graph: one parent per node, one child cluster per
    parent, equal-depth leaves and a single cluster below the server."""
    if (spec.cluster_sizes is None) == (spec.tree is None):
        raise HierarchyError("give exactly one of cluster_sizes or tree")
    if spec.cluster_sizes is not None:
        root = _tree_from_sizes([list(s) for s in spec.cluster_sizes])
    else:
        root = _parse_tree(spec.tree)
        if not root.clusters:
            raise HierarchyError("the server needs at least one child cluster")

    _split_shared_parents(root)
    _pad_leaves(root, 0, _leaf_depth(root))

    layers = [Layer(0, (), 1)]
    current = [root]
    j = 0
    while current[0].clusters:
        j += 1
        clusters, nxt, virtual = [], [], set()
        for parent_id, node in enumerate(current):
            (cluster,) = node.clusters
            members = tuple(range(len(nxt), len(nxt) + len(cluster)))
            for m, child in zip(members, cluster):
                if child.virtual:
                    virtual.add(m)
            nxt.extend(cluster)
            clusters.append(Cluster(
                layer=j,
                index=parent_id,
                members=members,
                parent=parent_id,
                virtual=all(child.virtual for child in cluster),
            ))
        layers.append(Layer(j, tuple(clusters), len(nxt), frozenset(virtual)))
        current = nxt
    return NetworkHierarchy(layers)


# --------------------------------------------------------------------------- #
# Cluster topologies
# --------------------------------------------------------------------------- #

@dataclass
class ClusterTopology:
    node_ids: tuple[int, ...]
    adjacency: np.ndarray
    mode: Mode = Mode.LUT
    weight_matrix: Optional[np.ndarray] = None
    lambda_bound: float = 0.0
    max_degree: int = 0
    edge_weight: float = 0.0
    positions: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    @cached_property
    def graph(self) -> nx.Graph:
        return nx.from_numpy_array(self.adjacency.astype(int))

    @cached_property
    def diameter(self) -> int:
        if self.n <= 1:
            return 0
        return int(nx.diameter(self.graph))

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])


def eut_topology(node_ids: Sequence[int]) -> ClusterTopology:
    n = len(node_ids)
    return ClusterTopology(
        node_ids=tuple(node_ids),
        adjacency=np.zeros((n, n), dtype=bool),
        mode=Mode.EUT,
    )


def default_edge_weight(max_degree: int) -> float:
    return 0.9 / (max_degree + 1)


def _is_connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    frontier = seen.copy()
    while frontier.any():
        frontier = adj[frontier].any(axis=0) & ~seen
        seen |= frontier
    return bool(seen.all())


def _batch_connected(adjs: np.ndarray) -> np.ndarray:
    """Connectivity of a stack of (B, n, n) adjacency matrices."""
    n = adjs.shape[-1]
    reach = (adjs | np.eye(n, dtype=bool)).astype(np.float64)
    steps = 1
    while steps < n:
        reach = np.minimum(reach @ reach, 1.0)
        steps *= 2
    return reach[:, 0, :].all(axis=1)


def build_consensus_matrix(topology, d: float) -> np.ndarray:
    """Constant edge weight matrix ``I - d * Laplacian``.

    ``d`` must lie strictly inside ``(0, 1 / max_degree)``.
    """
    adj = np.asarray(getattr(topology, "adjacency", topology), dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(adj, adj.T) or adj.diagonal().any():
        raise ValueError("adjacency must be symmetric with an empty diagonal")
    n = adj.shape[0]
    if n > 1 and not _is_connected(adj):
        raise TopologyError("consensus requires a connected cluster graph")
    deg = adj.sum(axis=1)
    max_degree = int(deg.max()) if n else 0
    upper = math.inf if max_degree == 0 else 1.0 / max_degree
    if not (0.0 < d < upper):
        raise ValueError(f"edge weight {d} outside (0, {upper})")
    laplacian = np.diag(deg.astype(float)) - adj.astype(float)
    return np.eye(n) - d * laplacian


def spectral_radius_bound(V: np.ndarray, n: Optional[int] = None) -> float:
    """Spectral radius of ``V - 11^T/n`` for a symmetric consensus matrix."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError("V must be square")
    n = V.shape[0] if n is None else n
    if n != V.shape[0]:
        raise ValueError(f"n={n} does not match V of shape {V.shape}")
    deflated = V - np.full((n, n), 1.0 / n)
    eig = np.linalg.eigvalsh((deflated + deflated.T) / 2)
    return float(np.max(np.abs(eig)))


def generate_rgg_topology(
    n: int,
    radius_m: float,
    disc_radius_m: float = 100.0,
    rng: Optional[np.random.Generator] = None,
    d: Optional[float] = None,
    lambda_scale: float = 1.0,
    max_attempts: int = 1000,
    node_ids: Optional[Sequence[int]] = None,
) -> ClusterTopology:
    """Random geometric graph in a disc, redrawn until connected.

    Nodes are uniform in a disc of radius ``disc_radius_m``; an edge joins two
    nodes closer than ``radius_m``. The consensus matrix uses the constant
    edge weight ``d`` (default ``0.9 / (max_degree + 1)``); ``lambda_scale``
    inflates the recorded spectral bound for pessimistic control.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if radius_m <= 0 or disc_radius_m <= 0:
        raise ValueError("radii must be positive")
    if lambda_scale < 1.0:
        raise ValueError("lambda_scale must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    ids = tuple(range(n)) if node_ids is None else tuple(node_ids)

    found = None
    drawn = 0
    while drawn < max_attempts and found is None:
        # placements are drawn in batches; the first connected one is kept
        batch = min(256, max_attempts - drawn)
        r = disc_radius_m * np.sqrt(rng.random((batch, n)))
        ang = 2.0 * np.pi * rng.random((batch, n))
        pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
        dist = np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)
        adjs = dist < radius_m
        adjs[:, np.arange(n), np.arange(n)] = False
        ok = _batch_connected(adjs)
        if ok.any():
            found = int(np.argmax(ok))
            adj, pos = adjs[found], pts[found]
        drawn += batch
    if found is None:
        raise TopologyError(
            f"no connected RGG with n={n}, radius={radius_m} m in a "
            f"{disc_radius_m} m disc after {max_attempts} attempts; "
            "the connection threshold is too small"
        )

    max_degree = int(adj.sum(axis=1).max()) if n > 1 else 0
    weight = default_edge_weight(max_degree) if d is None else d
    V = build_consensus_matrix(adj, weight)
    lam = spectral_radius_bound(V, n) * lambda_scale
    if lam >= 1.0:
        raise TopologyError(f"spectral bound {lam} is not below 1")
    return ClusterTopology(
        node_ids=ids,
        adjacency=adj,
        mode=Mode.LUT,
        weight_matrix=V,
        lambda_bound=lam,
        max_degree=max_degree,
        edge_weight=weight,
        positions=pos,
    )


def topology_from_adjacency(
    adjacency: np.ndarray,
    d: Optional[float] = None,
    node_ids: Optional[Sequence[int]] = None,
) -> ClusterTopology:
    """LUT topology for a fixed graph (tests and hand-built clusters)."""
    adj = np.asarray(adjacency, dtype=bool)
    n = adj.shape[0]
    max_degree = int(adj.sum(axis=1).max()) if n > 1 else 0
    weight = default_edge_weight(max_degree) if d is None else d
    V = build_consensus_matrix(adj, weight)
    return ClusterTopology(
        node_ids=tuple(range(n)) if node_ids is None else tuple(node_ids),
        adjacency=adj,
        mode=Mode.LUT,
        weight_matrix=V,
        lambda_bound=spectral_radius_bound(V, n),
        max_degree=max_degree,
        edge_weight=weight,
    )
