from pathlib import Path

import numpy as np
import pytest

from mhfl.control import PolicyConfig
from mhfl.data import IID, NonIID, make_blobs, partition
from mhfl.model import LossSpec
from mhfl.network import HierarchySpec, build_hierarchy
from mhfl.protocol import Simulation, TopologyConfig

ROOT_CFG = Path(__file__).resolve().parents[1] / "configs" / "mnist125_policyA.cfg"


def make_sim(
    leaves=25,
    group=5,
    samples=1000,
    scheme=None,
    policy=None,
    mode="LUT",
    radius=(300.0,),
    eta=10.0,
    mu=0.1,
    kind="svm",
    seed=0,
    data_seed=0,
    static=False,
    features=20,
    classes=10,
):
    ds = make_blobs(samples, features, classes, rng=np.random.default_rng(data_seed))
    h = build_hierarchy(HierarchySpec.regular(leaves, group))
    scheme = IID() if scheme is None else scheme
    part = partition(ds, h.num_leaves, scheme, np.random.default_rng([seed, 0]))
    spec = LossSpec(kind, mu, eta)
    policy = PolicyConfig("fixed", theta=0) if policy is None else policy
    radius = list(radius)
    topo = TopologyConfig(
        radius_m=radius if len(radius) > 1 else radius[0],
        mode=mode,
        static=static,
    )
    return Simulation.from_partition(h, ds, part, spec, policy, topo=topo, seed=seed)


@pytest.fixture
def blobs():
    return make_blobs(600, 8, 4, rng=np.random.default_rng(3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def report(num, ok, detail=""):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
