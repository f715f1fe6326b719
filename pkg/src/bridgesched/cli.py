"""Command-line pipelines: calibrate, schedule, sample, evaluate, bench, replay.

Every command reads one declarative config (JSON or YAML) with ``--set
dotted.key=value`` overrides, writes its artifacts under ``--out`` and a
``manifest.json`` holding the resolved config, seeds and SHA-256 hashes of
inputs and outputs. Relative input paths resolve against the output
directory. Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bench import BenchConfig, improvement_matrix_csv, matched_nfe_run, summarize
from .bridges import (
    BridgeMixture,
    BrownianBridgeSpec,
    bb_doob_drift,
    bb_flow_divergence,
    bb_flow_field,
    bb_reverse_drift,
    bridge_field_handle,
    conditional_field_factory,
    marginal_field_handle,
    mixture_forward_drift_handle,
    mixture_reverse_drift_handle,
)
from .core import FieldHandle, RateCurve, SampleBatch, TimeGrid
from .entropy import ProbeConfig, build_calibration_set, cond_marg_rate
from .errors import BridgeSchedError, ConfigError, InvalidInput, NumericalFailure
from .evaluation import MetricRecord, ResultsSet, bootstrap_mean_ci, match_units, median_bandwidth, mmd
from .flowmodel import (
    ScenarioSpec,
    TrainConfig,
    cfm_train,
    learned_rate_profile,
    learned_sde_drift,
    load_params,
    model_handle,
    save_params,
    scenario_mixture,
    scenario_sampler,
)
from .scheduling import KINDS, ScheduleSpec, build_schedule, schedule_to_json
from .solvers import ODE_METHODS, SDE_METHODS, ode_integrate, sde_integrate

OUT_ENV = "BRIDGESCHED_OUT"
COMMANDS = ("calibrate", "schedule", "sample", "evaluate", "bench")


class ReplayMismatch(BridgeSchedError):
    pass


# --------------------------------------------------------------------------
# config plumbing


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError("config", f"file {path} does not exist")
    text = p.read_text()
    try:
        cfg = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError("config", f"cannot parse {path}: {e}") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be a mapping")
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.setdefault(p, {}), dict):
                raise ConfigError(key, f"{p} is not a mapping")
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


_MISSING = object()


def _get(cfg: dict, path: str, kind=None, default=_MISSING):
    node = cfg
    for p in path.split("."):
        if not isinstance(node, dict) or p not in node:
            if default is _MISSING:
                raise ConfigError(path, "missing required field")
            return default
        node = node[p]
    if kind is not None and node is not None:
        try:
            if kind is int and (isinstance(node, bool) or float(node) != int(node)):
                raise ValueError
            node = kind(node)
        except (TypeError, ValueError):
            raise ConfigError(path, f"expected {kind.__name__}, got {node!r}") from None
    return node


def _positive(cfg, path, default=_MISSING):
    v = _get(cfg, path, float, default)
    if v is None and default is _MISSING:
        raise ConfigError(path, "missing required field")
    if v is not None and not v > 0:
        raise ConfigError(path, f"must be positive, got {v}")
    return v


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


class Run:
    """Output directory, input resolution and artifact bookkeeping for one command."""

    def __init__(self, out: Path, base: Path):
        self.out = out
        self.base = base
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = {}

    def input(self, rel, field) -> Path:
        p = Path(rel)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(field, f"file {rel} not found")
        self.inputs[str(rel)] = _sha256(p)
        return p

    def read_json(self, rel, field) -> dict:
        try:
            return json.loads(self.input(rel, field).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(field, f"{rel} is not valid JSON: {e}") from None

    def write(self, name: str, text: str):
        p = self.out / name
        p.write_text(text)
        self.outputs[name] = _sha256(p)

    def write_json(self, name, obj):
        self.write(name, _dump_json(obj))

    def manifest(self, command: str, config: dict, seeds: dict):
        self.write_json("manifest.json", {
            "version": 1,
            "command": command,
            "package_version": __version__,
            "config": config,
            "seeds": seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": dict(sorted(self.outputs.items())),
        })


# --------------------------------------------------------------------------
# shared builders


def _mixture_from(cfg: dict, run: Run, seed: int) -> tuple:
    """Mixture from ``scenario``, inline ``mixture`` or ``mixture_file``; returns (mix, scenario or None)."""
    if "scenario" in cfg:
        kind = _get(cfg, "scenario.kind", str)
        sigma0 = _positive(cfg, "scenario.sigma0")
        n = _get(cfg, "scenario.n", int, 256)
        try:
            spec = ScenarioSpec(kind, sigma0, _get(cfg, "scenario.seed", int, seed))
        except InvalidInput as e:
            raise ConfigError("scenario.kind", str(e)) from None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return scenario_mixture(spec, n), spec
    if "mixture" in cfg:
        m = _get(cfg, "mixture")
        sigma0 = _positive(cfg, "mixture.sigma0")
        src = np.asarray(_get(cfg, "mixture.sources"), dtype=float)
        tgt = np.asarray(_get(cfg, "mixture.targets"), dtype=float)
        if "coupling" in m:
            return BridgeMixture(SampleBatch(src), SampleBatch(tgt), m["coupling"], sigma0), None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return BridgeMixture.from_samples(src, tgt, sigma0), None
    if "mixture_file" in cfg:
        return BridgeMixture.from_json(run.read_json(cfg["mixture_file"], "mixture_file")), None
    raise ConfigError("scenario", "need one of scenario, mixture or mixture_file")


def _probes(cfg, seed) -> ProbeConfig:
    try:
        return ProbeConfig(
            _get(cfg, "probes.count", int, 4),
            _get(cfg, "probes.distribution", str, "rademacher"),
            _get(cfg, "probes.seed", int, seed),
            bool(_get(cfg, "probes.shared_across_fields", None, True)),
        )
    except InvalidInput as e:
        raise ConfigError("probes", str(e)) from None


def _train_config(cfg, seed) -> TrainConfig:
    return TrainConfig(
        hidden=_get(cfg, "train.hidden", int, 64),
        lr=_positive(cfg, "train.lr", 1e-3),
        batch=_get(cfg, "train.batch", int, 256),
        steps=_get(cfg, "train.steps", int, 5000),
        seed=_get(cfg, "train.seed", int, seed),
        momentum=_get(cfg, "train.momentum", float, 0.9),
    )


def _samples_json(points, meta) -> dict:
    return {"version": 1, "n": int(points.shape[0]), "dim": int(points.shape[1]),
            "meta": meta, "points": points.tolist()}


def _read_points(doc: dict, field: str) -> np.ndarray:
    if doc.get("version") != 1 or "points" not in doc:
        raise ConfigError(field, "not a version-1 sample file")
    return SampleBatch(doc["points"]).points


# --------------------------------------------------------------------------
# commands


def cmd_calibrate(cfg: dict, run: Run) -> dict:
    """Estimate a cond-marg rate curve on a time mesh."""
    seed = _get(cfg, "seed", int, 0)
    mix, spec = _mixture_from(cfg, run, seed)
    M = _get(cfg, "mesh.size", int, 50)
    eps = _positive(cfg, "mesh.eps", 1e-3)
    n = _get(cfg, "states_per_time", int, 256)
    probes = _probes(cfg, seed)
    field = _get(cfg, "field", str, "analytic")
    try:
        cal = build_calibration_set(mix, M, eps, n, seed)
    except InvalidInput as e:
        raise ConfigError("mesh", str(e)) from None
    if field == "analytic":
        curve = cond_marg_rate(cal, conditional_field_factory(mix), marginal_field_handle(mix), probes)
    elif field == "analytic_cond":
        curve = cond_marg_rate(cal, None, marginal_field_handle(mix), probes, analytic_cond=bb_flow_divergence)
    elif field == "learned":
        params, loss = cfm_train(spec, mix, _train_config(cfg, seed))
        curve = learned_rate_profile(params, mix, cal, probes)
        run.write_json("params.json", params.to_json())
        run.write("loss.csv", "step,loss\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(loss.tolist())))
    else:
        raise ConfigError("field", f"expected analytic, analytic_cond or learned, got {field!r}")
    run.write_json("rate.json", curve.to_json())
    run.write_json("calibration.json", cal.to_json())
    run.write_json("mixture.json", mix.to_json())
    return {"seed": seed, "probe_seed": probes.seed}


def cmd_schedule(cfg: dict, run: Run) -> dict:
    """Turn a rate curve or a baseline kind into a time grid."""
    kind = _get(cfg, "kind", str, "entropic")
    if kind not in KINDS:
        raise ConfigError("kind", f"expected one of {KINDS}, got {kind!r}")
    try:
        spec = ScheduleSpec(
            kind,
            _get(cfg, "steps", int),
            _get(cfg, "transform", str, "log1p"),
            _get(cfg, "gamma", float, 2.0),
            _get(cfg, "alpha", float, 9.0),
            _get(cfg, "a", float, 3.0),
            _get(cfg, "floor", float, None),
            _get(cfg, "window", int, 5),
        )
    except InvalidInput as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("schedule", str(e)) from None
    curve = None
    if kind == "entropic":
        curve = RateCurve.from_json(run.read_json(_get(cfg, "rate_file", str), "rate_file"))
    grid = build_schedule(spec, curve)
    run.write_json("schedule.json", schedule_to_json(spec, grid, _positive(cfg, "bcr_eps", 0.1)))
    return {}


def _bridge_spec(cfg) -> BrownianBridgeSpec:
    return BrownianBridgeSpec(
        np.asarray(_get(cfg, "field.x0"), dtype=float),
        np.asarray(_get(cfg, "field.x1"), dtype=float),
        _positive(cfg, "field.sigma0"),
    )


def _build_field(cfg, run, seed, stochastic, reverse):
    """(drift handle, sigma, metadata) for the configured field source."""
    ftype = _get(cfg, "field.type", str)
    meta = {}
    if ftype == "constant":
        c = np.asarray(_get(cfg, "field.value"), dtype=float)
        h = FieldHandle(lambda x, t: np.broadcast_to(c, np.shape(x)).copy(), c.size,
                        lambda x, t, u: np.zeros_like(u), name="constant")
        return h, _get(cfg, "field.sigma", float, 0.0), meta, None
    if ftype == "bridge":
        spec = _bridge_spec(cfg)
        if stochastic:
            fn = bb_reverse_drift if reverse else bb_doob_drift
            h = FieldHandle(lambda x, t: fn(spec, x, t), spec.dim, name="bridge-drift")
        else:
            h = bridge_field_handle(spec)
        meta["sigma0"] = spec.sigma0
        return h, spec.sigma0, meta, spec
    if ftype == "mixture":
        mix, scen = _mixture_from(cfg["field"], run, seed)
        meta["sigma0"] = mix.sigma0
        if scen is not None:
            meta["scenario"] = scen.kind
        if stochastic:
            h = mixture_reverse_drift_handle(mix) if reverse else mixture_forward_drift_handle(mix)
        else:
            h = marginal_field_handle(mix)
        return h, mix.sigma0, meta, mix
    if ftype == "params":
        flow = load_params(run.input(_get(cfg, "field.params_file", str), "field.params_file"))
        sigma0 = _positive(cfg, "field.sigma0")
        meta["sigma0"] = sigma0
        if stochastic:
            noise = load_params(run.input(_get(cfg, "field.noise_params_file", str), "field.noise_params_file"))
            h = learned_sde_drift(flow, noise, sigma0, "reverse" if reverse else "forward")
        else:
            h = model_handle(flow)
        return h, sigma0, meta, None
    raise ConfigError("field.type", f"expected constant, bridge, mixture or params, got {ftype!r}")


def _initial_points(cfg, run, seed, src_obj, count, dim):
    itype = _get(cfg, "init.type", str, "points")
    if itype == "points":
        pts = np.asarray(_get(cfg, "init.points"), dtype=float)
        pts = np.atleast_2d(pts)
        if pts.shape[0] == 1 and count > 1:
            pts = np.repeat(pts, count, axis=0)
        return pts
    if itype == "mean_line":
        if not isinstance(src_obj, BrownianBridgeSpec):
            raise ConfigError("init.type", "mean_line needs a bridge field")
        t0 = _get(cfg, "init.t", float, 0.0)
        m = (1.0 - t0) * src_obj.x0 + t0 * src_obj.x1
        return np.repeat(m[None, :], count, axis=0)
    if itype == "scenario":
        spec = ScenarioSpec(_get(cfg, "init.kind", str), _positive(cfg, "init.sigma0", 1.0),
                            _get(cfg, "init.seed", int, seed))
        return scenario_sampler(spec, count, _get(cfg, "init.endpoint", str, "source")).points
    if itype == "file":
        return _read_points(run.read_json(_get(cfg, "init.file", str), "init.file"), "init.file")
    raise ConfigError("init.type", f"expected points, mean_line, scenario or file, got {itype!r}")


def cmd_sample(cfg: dict, run: Run) -> dict:
    """Integrate a field on a schedule and write endpoint samples."""
    seed = _get(cfg, "seed", int, 0)
    solver = _get(cfg, "solver", str, "heun")
    if solver not in ODE_METHODS + SDE_METHODS:
        raise ConfigError("solver", f"unknown solver {solver!r}")
    count = _get(cfg, "count", int, 1)
    if count < 1:
        raise ConfigError("count", "must be >= 1")
    if "schedule_file" in cfg:
        doc = run.read_json(_get(cfg, "schedule_file", str), "schedule_file")
        grid = TimeGrid(doc["nodes"])
    elif "schedule" in cfg:
        grid = build_schedule(ScheduleSpec(_get(cfg, "schedule.kind", str, "linear"), _get(cfg, "schedule.steps", int)))
    else:
        raise ConfigError("schedule_file", "need schedule_file or schedule")
    clip = _get(cfg, "clip_eps", float, None)
    if clip is not None:
        grid = grid.clipped(clip)
    direction = _get(cfg, "direction", str, "forward")
    if direction not in ("forward", "reverse"):
        raise ConfigError("direction", "expected forward or reverse")
    reverse = direction == "reverse"
    if reverse:
        grid = grid.reversed()
    stochastic = solver in SDE_METHODS
    field, sigma, meta, src_obj = _build_field(cfg, run, seed, stochastic, reverse)
    x = _initial_points(cfg, run, seed, src_obj, count, field.dim)
    if x.shape[1] != field.dim:
        raise ConfigError("init", f"initial points have dimension {x.shape[1]}, field has {field.dim}")
    if stochastic:
        traj = sde_integrate(field, lambda t: sigma, x, grid, solver, seed=seed)
    else:
        traj = ode_integrate(field, x, grid, solver)
    meta.update({"seed": seed, "solver": solver, "nfe": traj.nfe, "steps": grid.steps,
                 "scheduler": _get(cfg, "scheduler_name", str, "custom")})
    run.write_json("samples.json", _samples_json(traj.final, meta))
    if _get(cfg, "trajectories", None, False):
        run.write_json("trajectories.json", {"version": 1, "times": grid.nodes.tolist(),
                                             "orientation": grid.orientation,
                                             "states": np.transpose(traj.states, (1, 0, 2)).tolist()})
    return {"seed": seed, "nfe": traj.nfe}


def cmd_evaluate(cfg: dict, run: Run) -> dict:
    """MMD of sample files against a reference, with paired bootstrap."""
    ref = _read_points(run.read_json(_get(cfg, "reference", str), "reference"), "reference")
    arms = _get(cfg, "arms")
    if not isinstance(arms, dict) or not arms:
        raise ConfigError("arms", "must map scheduler names to sample files")
    bw = _get(cfg, "bandwidth", None, "reference_median")
    if bw == "reference_median":
        bw = median_bandwidth(ref)
    elif not isinstance(bw, str):
        bw = float(bw)
    results = ResultsSet()
    for name, paths in sorted(arms.items()):
        for k, rel in enumerate([paths] if isinstance(paths, str) else paths):
            doc = run.read_json(rel, f"arms.{name}[{k}]")
            pts = _read_points(doc, f"arms.{name}[{k}]")
            meta = doc.get("meta", {})
            results.add(MetricRecord(
                name, int(meta.get("nfe", 0)), str(meta.get("solver", "")), int(meta.get("seed", k)),
                str(meta.get("scenario", "")), float(meta.get("sigma0", 0.0)), "mmd2", mmd(pts, ref, bw)))
    baseline = _get(cfg, "baseline", str, sorted(arms)[0])
    R = _get(cfg, "bootstrap.R", int, 1000)
    alpha = _get(cfg, "bootstrap.alpha", float, 0.05)
    bseed = _get(cfg, "bootstrap.seed", int, 0)
    paired = []
    base = results.select(scheduler=baseline)
    for name in sorted(arms):
        if name == baseline:
            continue
        _, va, vb = match_units(base, results.select(scheduler=name))
        m, lo, hi = bootstrap_mean_ci(vb - va, R, alpha, bseed)
        paired.append({"baseline": baseline, "scheduler": name, "mean_delta": m, "ci": [lo, hi]})
    run.write("results.csv", results.to_csv())
    run.write_json("summary.json", {"version": 1, "metric": "mmd2", "bandwidth": bw, "paired": paired})
    return {"bootstrap_seed": bseed}


def cmd_bench(cfg: dict, run: Run) -> dict:
    """Matched-NFE sweep over scenarios, sigmas, seeds, solvers and budgets."""
    try:
        bc = BenchConfig.from_json(cfg)
    except InvalidInput as e:
        raise ConfigError("bench", str(e)) from None
    except TypeError as e:
        raise ConfigError("bench", str(e)) from None
    results, info = matched_nfe_run(bc, lambda msg: print(msg, file=sys.stderr))
    summary = summarize(results, bc)
    run.write("results.csv", results.to_csv())
    run.write_json("summary.json", summary)
    run.write("improvement_matrix.csv", improvement_matrix_csv(summary))
    rates = {k: {"mesh": v["rate_mesh"], "values": v["rate"]} for k, v in info.items()}
    run.write_json("rates.json", rates)
    return {"seeds": list(bc.seeds), "train_seed": bc.train_seed, "bootstrap_seed": bc.bootstrap_seed}


_DISPATCH = {
    "calibrate": cmd_calibrate,
    "schedule": cmd_schedule,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def execute(command: str, cfg: dict, out: Path, base: Path = None) -> Path:
    """Run one command and write its manifest; returns the manifest path."""
    run = Run(Path(out), Path(base) if base is not None else Path(out))
    seeds = _DISPATCH[command](cfg, run)
    run.manifest(command, cfg, seeds)
    return run.out / "manifest.json"


def replay(manifest_path, out=None) -> dict:
    """Re-execute a manifest and compare every artifact hash."""
    mpath = Path(manifest_path)
    man = json.loads(mpath.read_text())
    if man.get("version") != 1 or man.get("command") not in _DISPATCH:
        raise ConfigError("manifest", "not a version-1 run manifest")
    base = mpath.parent
    for rel, digest in man.get("inputs", {}).items():
        p = Path(rel) if Path(rel).is_absolute() else base / rel
        if not p.exists() or _sha256(p) != digest:
            raise ConfigError(f"inputs.{rel}", "input file is missing or changed since the run")
    target = Path(out) if out is not None else base / "replay"
    execute(man["command"], man["config"], target, base)
    new = json.loads((target / "manifest.json").read_text())
    diffs = sorted(k for k in set(man["artifacts"]) | set(new["artifacts"])
                   if man["artifacts"].get(k) != new["artifacts"].get(k))
    if diffs:
        raise ReplayMismatch(f"replayed artifacts differ: {diffs}")
    return {"out": str(target), "artifacts": len(new["artifacts"])}


# --------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bridgesched", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_DISPATCH[name].__doc__)
        p.add_argument("--config", "-c", help="JSON or YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted path); repeatable")
        p.add_argument("--out", "-o", help=f"output directory (default ${OUT_ENV} or current dir)")
    p = sub.add_parser("replay", help="Re-run a manifest and verify identical outputs.")
    p.add_argument("manifest")
    p.add_argument("--out", "-o", help="where to write the replay (default <run>/replay)")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "replay":
            res = replay(args.manifest, args.out)
            print(f"replay ok: {res['artifacts']} artifacts identical in {res['out']}")
            return 0
        cfg = apply_overrides(load_config(args.config), args.set)
        out = Path(args.out or os.environ.get(OUT_ENV) or ".")
        manifest = execute(args.command, cfg, out)
        print(f"wrote {manifest}")
        return 0
    except InvalidInput as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalFailure, BridgeSchedError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
