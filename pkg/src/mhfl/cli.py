"""Experiment runner.

    mhfl run --config configs/mnist125_policyA.cfg --out runs/a
    mhfl run --config configs/mnist125_policyA.cfg --baseline --out runs/eut
    mhfl compare runs/eut/seed_0.csv runs/a/seed_0.csv
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .control import PolicyConfig
from .data import IID, Dataset, NonIID, load_idx, make_blobs, partition
from .metrics import EnergyModel, TrainRecord, make_records, run_summary
from .model import LossSpec, reference_optimum
from .network import HierarchySpec, build_hierarchy
from .protocol import (
    GradShareConstant,
    GradShareDecayingStep,
    ParamShare,
    ScheduleError,
    Simulation,
    TopologyConfig,
    run_training,
)
from .sampling import ClusterSampling
from .theory import theorem1_curve

log = logging.getLogger("mhfl")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("\n".join(errors))


@dataclass
class HierarchyCfg:
    leaves: Optional[int] = 125
    group_size: Optional[int] = 5
    cluster_sizes: Optional[str] = None  # layers top-down separated by '/', e.g. "2 / 3,3"
    radius_m: list = field(default_factory=lambda: [60.0, 50.0, 40.0])
    disc_radius_m: float = 100.0
    d: Optional[float] = None
    static_topology: bool = False
    lambda_scale: float = 1.0
    mode: str = "LUT"
    lut_probability: Optional[float] = None
    max_attempts: int = 20000


@dataclass
class DatasetCfg:
    kind: str = "auto"  # auto | idx | blobs
    images: str = "data/train-images-idx3-ubyte"
    labels: str = "data/train-labels-idx1-ubyte"
    scheme: str = "iid"
    labels_per_node: int = 1
    samples: int = 5000
    features: int = 20
    classes: int = 10
    spread: float = 0.12
    seed: int = 0


@dataclass
class ModelCfg:
    kind: str = "svm"
    mu: float = 0.1
    eta: float = 10.0
    hidden: int = 32


@dataclass
class PolicyCfg:
    kind: str = "fixed"
    theta: Optional[int] = None
    theta_per_layer: Optional[list] = None
    sigma: Optional[list] = None
    epsilon: Optional[float] = None
    epsilon_rel: Optional[float] = None
    kappa: Optional[int] = None
    delta: Optional[float] = None
    omega: float = 2.0
    psi: Optional[float] = None
    chi: float = 1.0
    theta_cap: int = 500
    oracle_divergence: bool = False


@dataclass
class RunCfg:
    rounds: int = 30
    seeds: list = field(default_factory=lambda: [0])
    variant: str = "param"  # param | grad_decay | grad_const
    alpha: Optional[float] = None
    lam_step: Optional[float] = None
    step: Optional[float] = None
    reference_steps: Optional[int] = None  # default 10 x rounds
    init_scale: Optional[float] = None     # N(0, s^2) initial model; model default when empty


@dataclass
class SamplingCfg:
    fraction: float = 1.0


@dataclass
class OutputCfg:
    dir: str = "runs"
    bound: bool = False


@dataclass
class ExperimentConfig:
    hierarchy: HierarchyCfg = field(default_factory=HierarchyCfg)
    dataset: DatasetCfg = field(default_factory=DatasetCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    policy: PolicyCfg = field(default_factory=PolicyCfg)
    run: RunCfg = field(default_factory=RunCfg)
    sampling: SamplingCfg = field(default_factory=SamplingCfg)
    energy: EnergyModel = field(default_factory=EnergyModel)
    output: OutputCfg = field(default_factory=OutputCfg)


SECTIONS = [f.name for f in fields(ExperimentConfig)]
_LIST_FLOAT = {("hierarchy", "radius_m"), ("policy", "sigma")}
_LIST_INT = {("run", "seeds"), ("policy", "theta_per_layer")}


def _field_type(section: str, key: str):
    cls = type(getattr(ExperimentConfig(), section))
    for f in fields(cls):
        if f.name == key:
            return f.type
    return None


def _parse_value(section: str, key: str, raw: str):
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        return None
    if (section, key) in _LIST_FLOAT:
        return [float(x) for x in raw.replace(",", " ").split()]
    if (section, key) in _LIST_INT:
        return [int(x) for x in raw.replace(",", " ").split()]
    ftype = str(_field_type(section, key))
    if "bool" in ftype:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in ftype and "float" not in ftype:
        return int(raw)
    if "float" in ftype:
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unreadable config: {exc}"]) from exc
    errors = []
    cfg = ExperimentConfig()
    for name in cp.sections():
        if name not in SECTIONS:
            errors.append(f"[{name}]: unknown section")
            continue
        sec = getattr(cfg, name)
        known = {f.name for f in fields(sec)}
        updates = {}
        for key, raw in cp.items(name):
            if key not in known:
                errors.append(f"[{name}] {key}: unknown key")
                continue
            try:
                updates[key] = _parse_value(name, key, raw)
            except ValueError as exc:
                errors.append(f"[{name}] {key}: {exc}")
        try:
            setattr(cfg, name, replace(sec, **updates))
        except (ValueError, TypeError) as exc:
            errors.append(f"[{name}]: {exc}")
    # keys that failed to parse keep their defaults so the rest still gets checked
    errors += validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    return parse_config(text)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective config with every default spelled out."""
    out = io.StringIO()
    for name in SECTIONS:
        out.write(f"[{name}]\n")
        for key, val in asdict(getattr(cfg, name)).items():
            out.write(f"{key} = {_fmt(val)}\n".replace(" = \n", " =\n"))
        out.write("\n")
    return out.getvalue()


def hierarchy_spec(hc: HierarchyCfg) -> HierarchySpec:
    if hc.cluster_sizes:
        layers = [[int(x) for x in part.replace(",", " ").split()]
                  for part in hc.cluster_sizes.split("/")]
        return HierarchySpec(cluster_sizes=layers)
    return HierarchySpec.regular(hc.leaves, hc.group_size)


def policy_config(pc: PolicyCfg) -> PolicyConfig:
    return PolicyConfig(**asdict(pc))


def validate(cfg: ExperimentConfig) -> list[str]:
    errs = []
    hc = cfg.hierarchy
    try:
        h = build_hierarchy(hierarchy_spec(hc))
        if len(hc.radius_m) not in (1, h.depth):
            errs.append(f"[hierarchy] radius_m: need 1 or {h.depth} values")
    except (ValueError, TypeError) as exc:
        errs.append(f"[hierarchy] {exc}")
    if not hc.radius_m or any(r <= 0 for r in hc.radius_m):
        errs.append("[hierarchy] radius_m: radii must be positive")
    if hc.disc_radius_m <= 0:
        errs.append("[hierarchy] disc_radius_m: must be positive")
    if hc.lambda_scale < 1:
        errs.append("[hierarchy] lambda_scale: must be >= 1")
    if hc.mode.upper() not in ("LUT", "EUT"):
        errs.append("[hierarchy] mode: LUT or EUT")
    if hc.lut_probability is not None and not 0 <= hc.lut_probability <= 1:
        errs.append("[hierarchy] lut_probability: must lie in [0, 1]")
    if hc.max_attempts < 1:
        errs.append("[hierarchy] max_attempts: must be >= 1")

    dc = cfg.dataset
    if dc.kind not in ("auto", "idx", "blobs"):
        errs.append("[dataset] kind: auto, idx or blobs")
    if dc.scheme not in ("iid", "noniid"):
        errs.append("[dataset] scheme: iid or noniid")
    if dc.labels_per_node < 1:
        errs.append("[dataset] labels_per_node: must be >= 1")
    if dc.samples < 1 or dc.features < 1 or dc.classes < 2:
        errs.append("[dataset] samples/features/classes out of range")

    mc = cfg.model
    try:
        LossSpec(mc.kind, mc.mu, mc.eta, mc.hidden)
    except ValueError as exc:
        errs.append(f"[model] {exc}")

    errs += [f"[policy] {e}" for e in policy_config(cfg.policy).validate(mc.mu, mc.eta)]

    rc = cfg.run
    if rc.rounds < 0:
        errs.append("[run] rounds: must be >= 0")
    if not rc.seeds:
        errs.append("[run] seeds: at least one seed")
    if rc.variant not in ("param", "grad_decay", "grad_const"):
        errs.append("[run] variant: param, grad_decay or grad_const")
    if rc.variant == "grad_decay" and (rc.alpha is None or rc.lam_step is None):
        errs.append("[run] grad_decay needs alpha and lam_step")
    if rc.variant == "grad_const" and rc.step is None:
        errs.append("[run] grad_const needs step")
    if rc.reference_steps is not None and rc.reference_steps < 1:
        errs.append("[run] reference_steps: must be >= 1")

    if not 0 < cfg.sampling.fraction <= 1:
        errs.append("[sampling] fraction: must lie in (0, 1]")
    if cfg.energy.rate_bps <= 0:
        errs.append("[energy] rate_bps: must be positive")
    return errs


def _digest(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode())
    return h.hexdigest()[:16]


def load_dataset(dc: DatasetCfg) -> Dataset:
    if dc.kind in ("idx", "auto"):
        if Path(dc.images).exists() and Path(dc.labels).exists():
            return load_idx(dc.images, dc.labels)
        if dc.kind == "idx":
            raise ConfigError([f"[dataset] IDX files not found: {dc.images}, {dc.labels}"])
        log.warning("IDX files not found; using synthetic blobs")
    return make_blobs(dc.samples, dc.features, dc.classes, dc.spread,
                      np.random.default_rng(dc.seed))


def _variant(rc: RunCfg):
    if rc.variant == "grad_decay":
        return GradShareDecayingStep(rc.alpha, rc.lam_step)
    if rc.variant == "grad_const":
        return GradShareConstant(rc.step)
    return ParamShare()


@dataclass
class SeedResult:
    seed: int
    records: list[TrainRecord]
    header: dict
    path: Optional[Path] = None


def build_simulation(cfg: ExperimentConfig, seed: int, ds: Dataset, baseline: bool = False):
    hc, dc = cfg.hierarchy, cfg.dataset
    h = build_hierarchy(hierarchy_spec(hc))
    scheme = IID() if dc.scheme == "iid" else NonIID(dc.labels_per_node)
    part = partition(ds, h.num_leaves, scheme, np.random.default_rng([seed, 0]))
    mc = cfg.model
    spec = LossSpec(mc.kind, mc.mu, mc.eta, mc.hidden)
    if spec.convex:
        model = spec.build(ds.num_features, ds.num_classes)
        used = np.concatenate(part.assignment)
        bound = model.smoothness_bound(ds.features[used])
        if bound > spec.eta:
            log.warning("configured eta=%g is below the smoothness bound %.4g; using the bound",
                        spec.eta, bound)
            spec = replace(spec, eta=bound)
    topo = TopologyConfig(
        radius_m=hc.radius_m if len(hc.radius_m) > 1 else hc.radius_m[0],
        disc_radius_m=hc.disc_radius_m, d=hc.d, static=hc.static_topology,
        lambda_scale=hc.lambda_scale, mode="EUT" if baseline else hc.mode,
        lut_probability=None if baseline else hc.lut_probability,
        max_attempts=hc.max_attempts,
    )
    sim = Simulation.from_partition(h, ds, part, spec, policy_config(cfg.policy),
                                    topo=topo, seed=seed)
    return sim, part


def run_seed(cfg: ExperimentConfig, seed: int, ds: Dataset, baseline: bool = False,
             bound: bool = False) -> SeedResult:
    sim, part = build_simulation(cfg, seed, ds, baseline)
    init_rng = np.random.default_rng([seed, 6])
    if cfg.run.init_scale is None:
        w0 = sim.model.init_params(init_rng)
    else:
        w0 = cfg.run.init_scale * init_rng.standard_normal(sim.model.param_count)
    f0 = sim.global_loss(w0)
    ref_steps = cfg.run.reference_steps or 10 * max(cfg.run.rounds, 1)
    _, fstar = reference_optimum(sim.model, sim.X_all, sim.y_all, 1.0 / sim.loss_spec.eta,
                                 ref_steps, w0)
    sim.f0_gap = max(f0 - fstar, 0.0)
    sampling = ClusterSampling(cfg.sampling.fraction)
    rounds = run_training(sim, w0, cfg.run.rounds, _variant(cfg.run), sampling)
    curve = None
    if bound:
        curve = theorem1_curve(rounds, sim.consts, sim.f0_gap)
    records = make_records(rounds, sim.h, cfg.energy, curve)
    header = {
        "config_digest": _digest(dump_config(cfg)),
        "dataset_digest": _digest(ds.features.tobytes(), ds.labels.tobytes(),
                                  *[a.tobytes() for a in part.assignment]),
        "hierarchy_digest": _digest(json.dumps(sim.h.layer_sizes),
                                    json.dumps([c.members for c in sim.h.iter_clusters()])),
        "seed": seed,
        "mode": "EUT" if baseline else cfg.hierarchy.mode.upper(),
        "eta": repr(sim.loss_spec.eta),
        "f_star": repr(fstar),
    }
    return SeedResult(seed, records, header)


def csv_columns(depth: int) -> list[str]:
    return (["k", "loss", "acc"] + [f"theta_mean_L{j}" for j in range(1, depth + 1)]
            + ["d2d_params", "uplink_params", "energy_j", "agg_err", "bound_thm1"])


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, records: list[TrainRecord], header: dict, depth: int) -> None:
    with open(path, "w", newline="") as fh:
        for key, val in header.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_columns(depth))
        for r in records:
            w.writerow([r.k, _num(r.loss), _num(r.acc)] + [_num(t) for t in r.theta_mean]
                       + [r.d2d_params, r.uplink_params, _num(r.energy_j), _num(r.agg_err),
                          _num(r.bound_thm1)])


def read_csv(path) -> tuple[dict, list[TrainRecord]]:
    header, rows = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key] = val
        elif line:
            body.append(line)
    reader = csv.DictReader(body)
    for row in reader:
        thetas = [float(row[c]) for c in reader.fieldnames if c.startswith("theta_mean_L")]
        rows.append(TrainRecord(
            k=int(row["k"]), loss=float(row["loss"]),
            acc=float(row["acc"]) if row["acc"] else None,
            theta_mean=thetas, d2d_params=int(row["d2d_params"]),
            uplink_params=int(row["uplink_params"]), energy_j=float(row["energy_j"]),
            agg_err=float(row["agg_err"]),
            bound_thm1=float(row["bound_thm1"]) if row["bound_thm1"] else None,
        ))
    return header, rows


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None, baseline: bool = False,
                   bound: Optional[bool] = None) -> list[SeedResult]:
    out = Path(out or cfg.output.dir)
    bound = cfg.output.bound if bound is None else bound
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(dump_config(cfg))
    ds = load_dataset(cfg.dataset)
    depth = build_hierarchy(hierarchy_spec(cfg.hierarchy)).depth
    results, summary = [], {}
    for seed in cfg.run.seeds:
        res = run_seed(cfg, seed, ds, baseline, bound)
        res.path = out / f"seed_{seed}.csv"
        write_csv(res.path, res.records, res.header, depth)
        summary[str(seed)] = asdict(run_summary(res.records))
        results.append(res)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results


class DigestMismatch(ValueError):
    pass


def compare(baseline_csv, candidate_csv) -> dict:
    hb, rb = read_csv(baseline_csv)
    hc, rc = read_csv(candidate_csv)
    for key in ("dataset_digest", "hierarchy_digest"):
        if key not in hb or key not in hc:
            raise DigestMismatch(f"missing {key} in CSV header")
        if hb[key] != hc[key]:
            raise DigestMismatch(f"{key} differs: {hb[key]} vs {hc[key]}")
    s = run_summary(rc, rb)
    sb = run_summary(rb, rb)

    def delta(c, b):
        return 0.0 if b == 0 else 100.0 * (c - b) / b

    if s.target_round is not None and sb.target_round is not None:
        cand = (s.uplink_to_target, s.energy_to_target)
        base = (sb.uplink_to_target, sb.energy_to_target)
        basis = "target"
    else:
        cand = (s.uplink_params, s.energy_j)
        base = (sb.uplink_params, sb.energy_j)
        basis = "totals"
    return {
        "basis": basis,
        "target_round_baseline": sb.target_round,
        "target_round_candidate": s.target_round,
        "uplink_delta_pct": delta(cand[0], base[0]),
        "energy_delta_pct": delta(cand[1], base[1]),
        "final_loss_baseline": sb.final_loss,
        "final_loss_candidate": s.final_loss,
    }


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhfl", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed-override", type=int, nargs="+", default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--dry-run", action="store_true")
    r.add_argument("--baseline", action="store_true", help="force every cluster to EUT")
    r.add_argument("--bound", action="store_true", help="emit the theorem bound column")
    c = sub.add_parser("compare", help="savings of a candidate run against a baseline")
    c.add_argument("baseline_csv")
    c.add_argument("candidate_csv")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.cmd == "compare":
        try:
            report = compare(args.baseline_csv, args.candidate_csv)
        except (DigestMismatch, OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for key, val in report.items():
            print(f"{key}: {val}")
        return 0

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return 2
    if args.seed_override:
        cfg.run.seeds = list(args.seed_override)
    if args.dry_run:
        h = build_hierarchy(hierarchy_spec(cfg.hierarchy))
        ds = load_dataset(cfg.dataset)
        n = h.num_leaves
        D = (len(ds) // n) * n if cfg.dataset.scheme == "iid" else None
        print(f"phi={h.phi}")
        print("N=" + ",".join(str(x) for x in h.layer_sizes))
        if D is None:
            sim, _ = build_simulation(cfg, cfg.run.seeds[0], ds)
            D = sim.D
        print(f"D={D}")
        return 0
    try:
        results = run_experiment(cfg, args.out, args.baseline, args.bound or None)
    except (ConfigError, ScheduleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for res in results:
        print(res.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
