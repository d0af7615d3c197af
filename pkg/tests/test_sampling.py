import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhfl.network import HierarchySpec, build_hierarchy
from mhfl.sampling import ClusterSampling, all_active, draw_active


def net(leaves=125, counts=None):
    h = build_hierarchy(HierarchySpec.regular(leaves, 5))
    return h.with_data(counts if counts is not None else [10] * leaves)


def test_everything_active_at_full_fraction():
    h = net()
    a = draw_active(h, 1.0, np.random.default_rng(0))
    assert a.d_s == 1250
    assert all(x.all() for x in a.active)
    assert len(all_active(h).active_bottom) == 25


def test_fraction_selects_bottom_clusters():
    h = net()
    a = draw_active(h, 0.2, np.random.default_rng(1))
    assert len(a.active_bottom) == 5
    assert a.active[3].sum() == 25
    assert a.d_s == 250
    assert a.active[0][0]


def test_tiny_fraction_keeps_one_cluster():
    a = draw_active(net(), 1e-6, np.random.default_rng(0))
    assert len(a.active_bottom) == 1


def test_bad_fraction():
    with pytest.raises(ValueError):
        ClusterSampling(0.0)
    with pytest.raises(ValueError):
        draw_active(net(), 1.5, np.random.default_rng(0))


def test_needs_data_counts():
    h = build_hierarchy(HierarchySpec.regular(25, 5))
    with pytest.raises(ValueError):
        all_active(h)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 10_000))
def test_active_paths_are_closed(fraction, seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 20, 125)
    h = net(counts=counts)
    a = ClusterSampling(fraction).draw(h, rng)
    for j in range(1, h.depth + 1):
        for c in h.clusters(j):
            child_on = a.active[j][list(c.members)]
            # a parent is on exactly when one of its children is
            assert a.active[j - 1][c.parent] == child_on.any()
            assert a.cluster_active(h, j, c.index) == child_on.any()
    assert a.d_s == counts[a.active[h.depth]].sum()
