"""Shared value types: time grids, rate curves, sample batches, vector fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BadEndpoints, InvalidInput, MeshOutOfHull, NonMonotone, TooShort

INCREASING = "increasing"
DECREASING = "decreasing"
FORMAT_VERSION = 1


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Monotone time nodes ``t_0, ..., t_N`` (N intervals, N + 1 nodes).

    ``lo`` / ``hi`` are the declared endpoints; they are 0 and 1 unless the grid
    was clipped away from the singular ends of a bridge.
    """

    nodes: np.ndarray
    orientation: str = INCREASING
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes))

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    def reversed(self) -> "TimeGrid":
        flip = DECREASING if self.orientation == INCREASING else INCREASING
        return TimeGrid(self.nodes[::-1].copy(), flip, self.lo, self.hi)

    def increasing(self) -> "TimeGrid":
        return self if self.orientation == INCREASING else self.reversed()

    def clipped(self, eps: float) -> "TimeGrid":
        """Affinely map the nodes of a [0, 1] grid into [eps, 1 - eps]."""
        if not 0.0 <= eps < 0.5:
            raise InvalidInput(f"clip eps must lie in [0, 0.5), got {eps}")
        g = self.increasing()
        nodes = (g.nodes - g.lo) / (g.hi - g.lo)
        out = TimeGrid(eps + (1.0 - 2.0 * eps) * nodes, INCREASING, eps, 1.0 - eps)
        # pin endpoints so no rounding leaks into the declared range
        n = out.nodes.copy()
        n[0], n[-1] = eps, 1.0 - eps
        out = TimeGrid(n, INCREASING, eps, 1.0 - eps)
        return out if self.orientation == INCREASING else out.reversed()

    def __eq__(self, other):
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return (
            self.orientation == other.orientation
            and self.lo == other.lo
            and self.hi == other.hi
            and np.array_equal(self.nodes, other.nodes)
        )

    def to_json(self) -> dict:
        d = {"version": FORMAT_VERSION, "orientation": self.orientation,
             "nodes": [float(v) for v in self.nodes]}
        if (self.lo, self.hi) != (0.0, 1.0):
            d["endpoints"] = [self.lo, self.hi]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TimeGrid":
        _check_version(d)
        lo, hi = d.get("endpoints", (0.0, 1.0))
        return validate_grid(cls(d["nodes"], d.get("orientation", INCREASING), lo, hi))


def validate_grid(grid: TimeGrid) -> TimeGrid:
    """Return ``grid`` unchanged if every invariant holds, else raise.

    Raises TooShort, NonMonotone or BadEndpoints, checked in that order.
    """
    nodes = np.asarray(grid.nodes, dtype=float)
    if nodes.ndim != 1 or len(nodes) < 2:
        raise TooShort(f"grid needs at least 2 nodes, got {nodes.size}")
    if grid.orientation not in (INCREASING, DECREASING):
        raise InvalidInput(f"unknown orientation {grid.orientation!r}")
    if not np.all(np.isfinite(nodes)):
        raise NonMonotone("grid contains non-finite nodes")
    steps = np.diff(nodes) if grid.orientation == INCREASING else -np.diff(nodes)
    if np.any(steps <= 0):
        k = int(np.argmax(steps <= 0))
        raise NonMonotone(f"nodes not strictly {grid.orientation} at index {k}")
    first, last = (grid.lo, grid.hi) if grid.orientation == INCREASING else (grid.hi, grid.lo)
    if nodes[0] != first or nodes[-1] != last:
        raise BadEndpoints(
            f"grid runs {nodes[0]!r}..{nodes[-1]!r}, declared endpoints {first!r}..{last!r}"
        )
    return grid


class _PiecewiseLinear:
    """Linear interpolant on knots with constant extension to [0, 1]."""

    def _knots(self):
        x = np.asarray(self.mesh, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if x[0] > 0.0:
            x, y = np.r_[0.0, x], np.r_[y[0], y]
        if x[-1] < 1.0:
            x, y = np.r_[x, 1.0], np.r_[y, y[-1]]
        return x, y

    def __call__(self, t):
        return np.interp(t, self.mesh, self.values)

    def cumulative(self, t):
        """Exact integral of the interpolant from 0 to ``t`` (trapezoid rule on knots)."""
        x, y = self._knots()
        t = np.clip(np.asarray(t, dtype=float), x[0], x[-1])
        h = np.diff(x)
        ck = np.r_[0.0, np.cumsum(0.5 * h * (y[:-1] + y[1:]))]
        k = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(h) - 1)
        delta = t - x[k]
        # delta / h in [0, 1] stays finite even for subnormal knot spacing
        frac = delta / h[k]
        return ck[k] + delta * (y[k] + 0.5 * (y[k + 1] - y[k]) * frac)

    def integral(self, a: float = 0.0, b: float = 1.0) -> float:
        return float(self.cumulative(b) - self.cumulative(a))


@dataclass(frozen=True, eq=False)
class RateCurve(_PiecewiseLinear):
    """Nonnegative rate tabulated on a strictly increasing mesh in [0, 1].

    Evaluation between mesh points is linear; outside the mesh hull the end
    values are held constant.
    """

    mesh: np.ndarray
    values: np.ndarray
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        mesh = _frozen(self.mesh)
        values = _frozen(self.values)
        if mesh.ndim != 1 or mesh.shape != values.shape:
            raise InvalidInput("mesh and values must be 1-D arrays of equal length")
        if len(mesh) < 1:
            raise TooShort("rate curve needs at least one mesh point")
        if np.any(np.diff(mesh) <= 0):
            raise NonMonotone("rate-curve mesh must be strictly increasing")
        if mesh[0] < 0.0 or mesh[-1] > 1.0:
            raise MeshOutOfHull("rate-curve mesh must lie in [0, 1]")
        object.__setattr__(self, "mesh", mesh)
        object.__setattr__(self, "values", values)
        if self.stderr is not None:
            se = _frozen(self.stderr)
            if se.shape != mesh.shape:
                raise InvalidInput("stderr must match mesh length")
            object.__setattr__(self, "stderr", se)

    def with_values(self, values, stderr=None) -> "RateCurve":
        return RateCurve(self.mesh, values, stderr)

    def to_json(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "mesh": [float(v) for v in self.mesh],
            "values": [_json_float(v) for v in self.values],
            "stderr": None if self.stderr is None else [_json_float(v) for v in self.stderr],
        }

    @classmethod
    def from_json(cls, d: dict) -> "RateCurve":
        _check_version(d)
        se = d.get("stderr")
        vals = [np.nan if v is None else v for v in d["values"]]
        return cls(d["mesh"], vals, None if se is None else [np.nan if v is None else v for v in se])


@dataclass(frozen=True, eq=False)
class StepDensity:
    """Piecewise-constant density; ``values[k]`` holds on ``[edges[k], edges[k+1]]``."""

    edges: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edges", _frozen(self.edges))
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def mesh(self):
        return self.edges

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.values) - 1)
        return self.values[k]

    def cumulative(self, t):
        e, q = self.edges, self.values
        t = np.clip(np.asarray(t, dtype=float), e[0], e[-1])
        ck = np.r_[0.0, np.cumsum(q * np.diff(e))]
        k = np.clip(np.searchsorted(e, t, side="right") - 1, 0, len(q) - 1)
        return ck[k] + q[k] * (t - e[k])

    def integral(self, a: float = 0.0, b: float = 1.0) -> float:
        return float(self.cumulative(b) - self.cumulative(a))


def grid_to_density(grid: TimeGrid) -> StepDensity:
    """Node density of a grid: ``1 / (N * width)`` on each of its N intervals."""
    g = validate_grid(grid).increasing()
    widths = np.diff(g.nodes)
    return StepDensity(g.nodes, 1.0 / (g.steps * widths))


def resample_curve(curve: RateCurve, new_mesh) -> RateCurve:
    """Piecewise-linear resampling; no overshoot, so nonnegativity survives."""
    new_mesh = np.asarray(new_mesh, dtype=float)
    if new_mesh.ndim != 1 or new_mesh.size == 0:
        raise InvalidInput("new_mesh must be a non-empty 1-D sequence")
    if new_mesh[0] < curve.mesh[0] or new_mesh[-1] > curve.mesh[-1]:
        raise MeshOutOfHull(
            f"new mesh [{new_mesh[0]}, {new_mesh[-1]}] leaves hull "
            f"[{curve.mesh[0]}, {curve.mesh[-1]}]"
        )
    values = np.interp(new_mesh, curve.mesh, curve.values)
    se = None if curve.stderr is None else np.interp(new_mesh, curve.mesh, curve.stderr)
    return RateCurve(new_mesh, values, se)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    points: np.ndarray
    seed: object = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InvalidInput(f"sample batch must be n x d with n, d >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("sample batch contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class FieldHandle:
    """Time-dependent vector field evaluated on row batches.

    ``fn(x, t)`` takes ``x`` of shape (n, d) and ``t`` either a scalar or an
    (n,) array and returns (n, d). ``jvp(x, t, u)`` returns the Jacobian
    ``(dv/dx) u`` row-wise; when absent callers fall back to finite differences.
    """

    fn: Callable
    dim: int
    jvp: Optional[Callable] = None
    name: str = "field"
    eps_min: float = 1e-6
    meta: dict = field(default_factory=dict, compare=False)

    def __call__(self, x, t):
        return self.fn(x, t)


def _json_float(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _check_version(d):
    if d.get("version") != FORMAT_VERSION:
        raise InvalidInput(f"unsupported format version {d.get('version')!r}")
