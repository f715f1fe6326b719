"""Rate postprocessing, inverse-CDF grids, heuristic baselines and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .core import RateCurve, StepDensity, TimeGrid, grid_to_density, validate_grid
from .errors import (
    AllValuesNonFinite,
    BadEps,
    BadSpec,
    InvalidInput,
    UnnormalizedDensity,
    ZeroTotalMass,
)

KINDS = ("entropic", "linear", "cosine", "sigmoid", "power", "log")
TRANSFORMS = ("raw", "log1p")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    steps: int = 10
    transform: str = "log1p"
    gamma: float = 2.0
    alpha: float = 9.0
    a: float = 3.0
    floor: Optional[float] = None
    window: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadSpec(f"unknown schedule kind {self.kind!r}")
        if self.transform not in TRANSFORMS:
            raise BadSpec(f"unknown transform {self.transform!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise BadSpec(f"steps must be a positive integer, got {self.steps}")
        if not (self.gamma > 0 and self.alpha > 0 and self.a > 0):
            raise BadSpec("gamma, alpha and a must be positive")
        if self.floor is not None and not self.floor > 0:
            raise BadSpec("floor must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise BadSpec("smoothing window must be a positive odd integer")

    def with_steps(self, steps: int) -> "ScheduleSpec":
        return replace(self, steps=steps)


# Named arms used by the benchmark and CLI.
PRESETS = {
    "linear": ScheduleSpec("linear"),
    "power2": ScheduleSpec("power", gamma=2.0),
    "power3": ScheduleSpec("power", gamma=3.0),
    "log": ScheduleSpec("log"),
    "cosine": ScheduleSpec("cosine"),
    "sigmoid": ScheduleSpec("sigmoid"),
    "entropic": ScheduleSpec("entropic", transform="log1p"),
    "entropic_raw": ScheduleSpec("entropic", transform="raw"),
}


def preset(name: str, steps: int) -> ScheduleSpec:
    try:
        return PRESETS[name].with_steps(steps)
    except KeyError:
        raise BadSpec(f"unknown scheduler {name!r}; choose from {sorted(PRESETS)}") from None


def _smooth(values, window):
    if window == 1:
        return values.copy()
    half = window // 2
    M = len(values)
    out = np.empty_like(values)
    for i in range(M):
        h = min(half, i, M - 1 - i)
        out[i] = values[i - h:i + h + 1].mean()
    return out


def postprocess_rate(curve: RateCurve, floor: Optional[float] = None, window: int = 5) -> RateCurve:
    """Fill non-finite values, clip at a positive floor, then smooth on the mesh.

    Non-finite entries are linearly interpolated from finite neighbours. The
    default floor is ``1e-8 * max(values)``. Smoothing is a centred moving
    average whose window shrinks symmetrically near the mesh ends, so the two
    end values are left as they are.
    """
    vals = np.array(curve.values, dtype=float)
    ok = np.isfinite(vals)
    if not ok.any():
        raise AllValuesNonFinite("rate curve has no finite values")
    if not ok.all():
        vals[~ok] = np.interp(curve.mesh[~ok], curve.mesh[ok], vals[ok])
    if window < 1 or window % 2 == 0 or window > len(vals):
        raise InvalidInput(f"window must be odd and within [1, {len(vals)}], got {window}")
    if floor is None:
        vmax = vals.max()
        floor = 1e-8 * vmax if vmax > 0 else np.finfo(float).tiny
    elif not floor > 0:
        raise InvalidInput("floor must be positive")
    vals = np.maximum(vals, floor)
    return RateCurve(curve.mesh, _smooth(vals, window), curve.stderr)


def apply_transform(curve: RateCurve, phi: str = "log1p") -> RateCurve:
    if phi not in TRANSFORMS:
        raise InvalidInput(f"unknown transform {phi!r}")
    if np.any(np.asarray(curve.values) < 0):
        raise InvalidInput("transform expects nonnegative rates")
    vals = curve.values if phi == "raw" else np.log1p(curve.values)
    return RateCurve(curve.mesh, vals, None)


def normalize_density(curve: RateCurve) -> RateCurve:
    """Scale a curve so its interpolant integrates to one over [0, 1]."""
    total = curve.integral(0.0, 1.0)
    if not total > 0 or not np.isfinite(total):
        raise ZeroTotalMass("curve has no positive mass to normalise")
    return RateCurve(curve.mesh, np.asarray(curve.values) / total, None)


def build_entropic_grid(curve: RateCurve, N: int) -> TimeGrid:
    """Inverse-CDF grid ``t_k = Q^{-1}(k / N)`` of a positive rate curve.

    Q is the exact cumulative of the curve's linear interpolant (held constant
    outside the mesh hull), normalised to Q(0) = 0 and Q(1) = 1; inversion is
    piecewise linear in Q so the result is monotone by construction.
    """
    if N < 1:
        raise InvalidInput("N must be >= 1")
    vals = np.asarray(curve.values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise InvalidInput("rate curve has non-finite values; postprocess it first")
    if np.all(vals <= 0):
        raise ZeroTotalMass("rate curve is identically zero")
    if np.any(vals <= 0):
        raise InvalidInput("rate curve must be strictly positive; postprocess it first")
    if np.all(vals == vals[0]):
        # constant rate: Q(t) = t, so the grid is linear without round-off
        return validate_grid(TimeGrid(np.arange(N + 1) / N))
    knots, _ = curve._knots()
    Q = curve.cumulative(knots)
    Q = np.maximum.accumulate(Q / Q[-1])
    Q[0], Q[-1] = 0.0, 1.0
    nodes = np.interp(np.arange(N + 1) / N, Q, knots)
    nodes[0], nodes[-1] = 0.0, 1.0
    return validate_grid(TimeGrid(nodes))


def entropic_schedule(curve: RateCurve, N: int, transform: str = "log1p", floor=None, window: int = 5):
    """Full pipeline from a raw rate to (grid, normalised density)."""
    M = len(curve.mesh)
    if window > M:  # short meshes: widest odd window that fits
        window = M if M % 2 else M - 1
    q = apply_transform(postprocess_rate(curve, floor, window), transform)
    return build_entropic_grid(q, N), normalize_density(q)


def _logistic(z):
    return 1.0 / (1.0 + np.exp(-z))


def baseline_grid(spec: ScheduleSpec) -> TimeGrid:
    """Heuristic grids on [0, 1] with ``spec.steps`` intervals.

    The sigmoid (slope ``a``) and log (``alpha``) parameterisations are
    conventions of this package, not canonical definitions.
    """
    N = spec.steps
    u = np.arange(N + 1) / N
    if spec.kind == "linear":
        t = u
    elif spec.kind == "cosine":
        t = (1.0 - np.cos(np.pi * u)) / 2.0
    elif spec.kind == "power":
        t = u**spec.gamma
    elif spec.kind == "sigmoid":
        lo, hi = _logistic(-spec.a), _logistic(spec.a)
        t = (_logistic(spec.a * (2.0 * u - 1.0)) - lo) / (hi - lo)
    elif spec.kind == "log":
        t = np.log1p(spec.alpha * u) / np.log1p(spec.alpha)
    else:
        raise BadSpec(f"{spec.kind!r} is not a baseline schedule")
    t = np.array(t, dtype=float)
    t[0], t[-1] = 0.0, 1.0
    return validate_grid(TimeGrid(t))


Density = Union[RateCurve, StepDensity, TimeGrid]


def bcr(density: Density, eps: float) -> float:
    """Boundary concentration ratio: mass in [0, eps] and [1 - eps, 1] over 2 eps."""
    if not 0 < eps < 0.5:
        raise BadEps(f"eps must lie in (0, 0.5), got {eps}")
    if isinstance(density, TimeGrid):
        density = grid_to_density(density)
    total = density.integral(0.0, 1.0)
    if abs(total - 1.0) > 1e-6:
        raise UnnormalizedDensity(f"density integrates to {total}, not 1")
    mass = density.integral(0.0, eps) + density.integral(1.0 - eps, 1.0)
    return mass / (2.0 * eps)


def optimal_density(C: RateCurve, p: int) -> RateCurve:
    """Step density ``C^{1/(p+1)}`` minimising order-p local-error accumulation."""
    if p < 1:
        raise InvalidInput("solver order p must be a positive integer")
    vals = np.asarray(C.values, dtype=float)
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise InvalidInput("error constant must be finite and nonnegative")
    if np.all(vals == 0):
        raise ZeroTotalMass("error constant is identically zero")
    return normalize_density(RateCurve(C.mesh, vals ** (1.0 / (p + 1)), None))


def build_schedule(spec: ScheduleSpec, curve: Optional[RateCurve] = None):
    """Grid for any schedule kind; entropic kinds need a rate curve."""
    if spec.kind == "entropic":
        if curve is None:
            raise BadSpec("entropic schedules need a rate curve")
        grid, _ = entropic_schedule(curve, spec.steps, spec.transform, spec.floor, spec.window)
        return grid
    return baseline_grid(spec)


def schedule_to_json(spec: ScheduleSpec, grid: TimeGrid, bcr_eps: float = 0.1) -> dict:
    d = {"version": 1, "kind": spec.kind}
    if spec.kind == "entropic":
        d["transform"] = spec.transform
    d["nodes"] = [float(v) for v in grid.nodes]
    d["bcr"] = {"eps": bcr_eps, "value": bcr(grid, bcr_eps)}
    return d
