"""Matched-NFE sweep: scenarios x sigma0 x seeds x solvers x budgets x schedulers.

Per (scenario, sigma0) one flow model (and, for SDE solvers, one noise
predictor) is trained with a fixed seed and shared by every arm. The rate
profile for entropic grids comes from the trained flow model. Within a cell
(scenario, sigma0, seed, solver, budget) every scheduler starts from the same
initial points and, for SDEs, the same Brownian increments.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .core import TimeGrid
from .entropy import ProbeConfig, build_calibration_set
from .errors import InvalidInput, NfeMismatch
from .evaluation import (
    MetricRecord,
    ResultsSet,
    bootstrap_mean_ci,
    match_units,
    median_bandwidth,
    mmd,
)
from .flowmodel import (
    ScenarioSpec,
    TrainConfig,
    cfm_train,
    learned_rate_profile,
    learned_sde_drift,
    model_handle,
    scenario_mixture,
    scenario_sampler,
)
from .scheduling import PRESETS, build_schedule, preset
from .solvers import ODE_METHODS, SDE_METHODS, nfe_for, ode_integrate, path_noise, sde_integrate


@dataclass(frozen=True)
class BenchConfig:
    schedulers: Tuple[str, ...] = ("linear", "entropic")
    budgets: Tuple[int, ...] = (10, 25, 50)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    scenarios: Tuple[str, ...] = ("CC", "CD", "DC", "DD")
    sigmas: Tuple[float, ...] = (0.1, 0.5, 1.0)
    solvers: Tuple[str, ...] = ("heun", "sde_heun")
    n_samples: int = 2000
    n_couple: int = 256
    train_steps: int = 5000
    hidden: int = 64
    lr: float = 1e-3
    batch: int = 256
    momentum: float = 0.9
    train_seed: int = 0
    calib_mesh: int = 50
    calib_states: int = 256
    probes: int = 4
    eps: float = 1e-3
    direction: str = "reverse"
    baseline: str = "linear"
    candidate: str = "entropic"
    bootstrap_R: int = 1000
    alpha: float = 0.05
    bootstrap_seed: int = 0
    workers: int = 1
    solver_override: Tuple[Tuple[str, str], ...] = ()  # (scheduler, solver) pairs

    def __post_init__(self):
        for name in self.schedulers:
            if name not in PRESETS:
                raise InvalidInput(f"unknown scheduler {name!r}")
        for s in self.solvers + tuple(v for _, v in self.solver_override):
            if s not in ODE_METHODS + SDE_METHODS:
                raise InvalidInput(f"unknown solver {s!r}")
        for k in self.scenarios:
            ScenarioSpec(k, 1.0)
        if any(not s > 0 for s in self.sigmas):
            raise InvalidInput("sigma0 values must be positive")
        if any(int(b) != b or b < 1 for b in self.budgets):
            raise InvalidInput("budgets must be positive integers")
        if self.direction not in ("forward", "reverse"):
            raise InvalidInput("direction must be 'forward' or 'reverse'")
        if not 0 < self.eps < 0.5:
            raise InvalidInput("eps must lie in (0, 0.5)")
        if self.n_samples < 2:
            raise InvalidInput("n_samples must be >= 2")

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = [list(p) for p in v] if f.name == "solver_override" else (list(v) if isinstance(v, tuple) else v)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidInput(f"unknown bench fields: {sorted(extra)}")
        kw = {}
        for k, v in d.items():
            if k == "solver_override":
                v = tuple(tuple(p) for p in (v.items() if isinstance(v, dict) else v))
            elif isinstance(v, list):
                v = tuple(v)
            kw[k] = v
        return cls(**kw)


def _solver_for(cfg: BenchConfig, scheduler: str, solver: str) -> str:
    return dict(cfg.solver_override).get(scheduler, solver)


def _sample_seeds(seed: int):
    # initial points and reference points never share a stream with training data
    return 1000 + 2 * seed, 1001 + 2 * seed


@dataclass
class GroupModel:
    """Everything shared by the cells of one (scenario, sigma0) group."""

    spec: ScenarioSpec
    flow: object
    noise: Optional[object]
    rate: object
    grids: Dict[Tuple[str, int], TimeGrid]
    flow_loss: np.ndarray
    seconds: float


def train_group(cfg: BenchConfig, kind: str, sigma0: float) -> GroupModel:
    t0 = time.perf_counter()
    spec = ScenarioSpec(kind, sigma0, cfg.train_seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mix = scenario_mixture(spec, cfg.n_couple)
    hyper = TrainConfig(hidden=cfg.hidden, lr=cfg.lr, batch=cfg.batch, steps=cfg.train_steps,
                        seed=cfg.train_seed, momentum=cfg.momentum, eps=cfg.eps)
    flow, loss = cfm_train(spec, mix, hyper)
    noise = None
    if any(_solver_for(cfg, s, v) in SDE_METHODS for s in cfg.schedulers for v in cfg.solvers):
        noise, _ = cfm_train(spec, mix, replace(hyper, target="noise"))
    cal = build_calibration_set(mix, cfg.calib_mesh, cfg.eps, cfg.calib_states, cfg.train_seed)
    rate = learned_rate_profile(flow, mix, cal, ProbeConfig(cfg.probes, seed=cfg.train_seed))
    grids = {}
    for name in cfg.schedulers:
        for N in cfg.budgets:
            g = build_schedule(preset(name, N), rate).clipped(cfg.eps)
            grids[(name, N)] = g.reversed() if cfg.direction == "reverse" else g
    return GroupModel(spec, flow, noise, rate, grids, loss, time.perf_counter() - t0)


def _run_arm(model: GroupModel, grid: TimeGrid, solver: str, x_init, noise, sigma0):
    if solver in ODE_METHODS:
        return ode_integrate(model_handle(model.flow), x_init, grid, solver)
    drift = learned_sde_drift(model.flow, model.noise, sigma0, "reverse" if grid.orientation == "decreasing" else "forward")
    return sde_integrate(drift, lambda t: sigma0, x_init, grid, solver, noise=noise[: grid.steps])


def run_group(cfg: BenchConfig, kind: str, sigma0: float):
    """All cells of one (scenario, sigma0) group; returns (ResultsSet, GroupModel)."""
    model = train_group(cfg, kind, sigma0)
    start, end = ("target", "source") if cfg.direction == "reverse" else ("source", "target")
    results = ResultsSet()
    for seed in cfg.seeds:
        s_init, s_ref = _sample_seeds(seed)
        x_init = scenario_sampler(ScenarioSpec(kind, sigma0, s_init), cfg.n_samples, start).points
        ref = scenario_sampler(ScenarioSpec(kind, sigma0, s_ref), cfg.n_samples, end).points
        h = median_bandwidth(ref)
        noise = path_noise(seed, cfg.n_samples, max(cfg.budgets), x_init.shape[1])
        for solver in cfg.solvers:
            for N in cfg.budgets:
                arms = {}
                for name in cfg.schedulers:
                    arm_solver = _solver_for(cfg, name, solver)
                    arms[name] = _run_arm(model, model.grids[(name, N)], arm_solver, x_init, noise, sigma0)
                nfes = {name: tr.nfe for name, tr in arms.items()}
                if len(set(nfes.values())) != 1:
                    raise NfeMismatch(f"arms disagree on NFE in cell {(kind, sigma0, seed, solver, N)}: {nfes}")
                for name, tr in arms.items():
                    results.add(MetricRecord(name, tr.nfe, solver, seed, kind, float(sigma0), "mmd2",
                                             mmd(tr.final, ref, h)))
    return results, model


def _group_job(args):
    cfg, kind, sigma0 = args
    res, model = run_group(cfg, kind, sigma0)
    return res, kind, sigma0, model.rate, model.seconds


def matched_nfe_run(cfg: BenchConfig, progress: Optional[Callable[[str], None]] = None):
    """Run the full sweep; returns (ResultsSet, per-group info dict)."""
    jobs = [(cfg, k, s) for k in cfg.scenarios for s in cfg.sigmas]
    results = ResultsSet()
    info = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            outs = list(ex.map(_group_job, jobs))
    else:
        outs = map(_group_job, jobs)
    for res, kind, sigma0, rate, secs in outs:
        results.merge(res)
        info[f"{kind}/{sigma0}"] = {"rate_mesh": rate.mesh.tolist(), "rate": rate.values.tolist(),
                                    "train_seconds": secs}
        if progress is not None:
            progress(f"{kind} sigma0={sigma0}: {len(res)} records")
    return results, info


def summarize(results: ResultsSet, cfg: BenchConfig, metric: str = "mmd2") -> dict:
    """Per-arm means/stddevs, paired bootstrap summaries and improvement matrices.

    Two aggregations of the candidate-vs-baseline improvement are reported:
    ``per_cell`` averages seeds within each (scenario, sigma0) cell, takes
    ``100 (base - cand) / base`` per cell and bootstraps the mean over cells; ``pooled`` compares the mean raw metric across all
    cells and bootstraps the paired difference of raw values.
    """
    arms = {}
    for r in results:
        if r.metric != metric:
            continue
        arms.setdefault((r.scheduler, r.solver, r.nfe), []).append(r.value)
    arm_stats = [
        {"scheduler": s, "solver": v, "nfe": n, "count": len(x), "mean": float(np.mean(x)),
         "std": float(np.std(x, ddof=1)) if len(x) > 1 else 0.0}
        for (s, v, n), x in sorted(arms.items())
    ]
    improvements = []
    matrix = {}
    for solver in cfg.solvers:
        for N in cfg.budgets:
            base = results.select(scheduler=cfg.baseline, solver=solver, metric=metric)
            base = [r for r in base if r.nfe == nfe_for(solver, N)]
            for name in cfg.schedulers:
                if name == cfg.baseline:
                    continue
                cand = [r for r in results.select(scheduler=name, solver=solver, metric=metric)
                        if r.nfe == nfe_for(solver, N)]
                if not base or not cand:
                    continue
                units, vb, vc = match_units(base, cand)
                cells, pct = _cell_pct(units, vb, vc)
                m, lo, hi = bootstrap_mean_ci(pct, cfg.bootstrap_R, cfg.alpha, cfg.bootstrap_seed)
                d, dlo, dhi = bootstrap_mean_ci(vb - vc, cfg.bootstrap_R, cfg.alpha, cfg.bootstrap_seed)
                pooled = 100.0 * (vb.mean() - vc.mean()) / vb.mean()
                per_sigma = {}
                for s in cfg.sigmas:
                    sel = np.array([c[1] == float(s) for c in cells])
                    if sel.any():
                        per_sigma[str(s)] = float(pct[sel].mean())
                entry = {
                    "scheduler": name, "baseline": cfg.baseline, "solver": solver, "steps": N,
                    "units": len(units), "cells": len(cells),
                    "per_cell": {"mean_pct": m, "ci": [lo, hi]},
                    "pooled": {"pct": float(pooled), "mean_delta": d, "ci": [dlo, dhi]},
                    "per_sigma_mean_pct": per_sigma,
                }
                improvements.append(entry)
                matrix.setdefault(solver, {}).setdefault(name, {})[str(N)] = m
    return {"version": 1, "metric": metric, "arms": arm_stats, "improvements": improvements,
            "improvement_matrix": matrix}


def _cell_pct(units, vb, vc):
    # units are (seed, scenario, sigma0, nfe, solver, metric); average seeds within
    # each (scenario, sigma0) cell before taking the ratio, since a single seed's
    # unbiased MMD^2 can sit at or below zero
    cells = {}
    for u, b, c in zip(units, vb, vc):
        cells.setdefault((u[1], u[2]), []).append((b, c))
    keys = sorted(cells)
    pct = []
    for k in keys:
        b, c = np.mean(cells[k], axis=0)
        pct.append(100.0 * (b - c) / b)
    return keys, np.asarray(pct)


def improvement_matrix_csv(summary: dict) -> str:
    rows = ["solver,scheduler," + ",".join(sorted({str(e["steps"]) for e in summary["improvements"]}, key=int))]
    for solver, by_sched in summary["improvement_matrix"].items():
        for name, by_n in by_sched.items():
            cols = sorted(by_n, key=int)
            rows.append(",".join([solver, name] + [repr(float(by_n[c])) for c in cols]))
    return "\n".join(rows) + "\n"
