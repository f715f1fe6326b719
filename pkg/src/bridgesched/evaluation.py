"""Sample-quality and grid-geometry metrics, records and paired bootstrap."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import SampleBatch, TimeGrid, validate_grid
from .errors import InvalidInput, NoMatchedUnits, TooFewSamples

MATCH_KEY = ("seed", "scenario", "sigma0", "nfe", "solver", "metric")


@dataclass(frozen=True)
class MetricRecord:
    scheduler: str
    nfe: int
    solver: str
    seed: int
    scenario: str
    sigma0: float
    metric: str
    value: float

    @property
    def key(self):
        return (self.scheduler, self.nfe, self.solver, self.seed, self.scenario, self.sigma0, self.metric)

    @property
    def unit(self):
        return tuple(getattr(self, k) for k in MATCH_KEY)


_COLUMNS = [f.name for f in fields(MetricRecord)]
_CASTS = {"nfe": int, "seed": int, "sigma0": float, "value": float}


class ResultsSet:
    """Metric records with a unique key; adding a duplicate key is an error."""

    def __init__(self, records: Iterable[MetricRecord] = ()):
        self._rows: dict = {}
        for r in records:
            self.add(r)

    def add(self, rec: MetricRecord):
        if rec.key in self._rows:
            raise InvalidInput(f"duplicate result key {rec.key}")
        self._rows[rec.key] = rec

    def merge(self, other: "ResultsSet"):
        for r in other:
            self.add(r)
        return self

    def __iter__(self):
        return iter(self._rows.values())

    def __len__(self):
        return len(self._rows)

    def select(self, **match) -> list:
        return [r for r in self if all(getattr(r, k) == v for k, v in match.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        for r in sorted(self, key=lambda r: tuple(str(v) for v in r.key)):
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in _COLUMNS)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultsSet":
        rows = csv.DictReader(io.StringIO(text))
        return cls(MetricRecord(**{k: _CASTS.get(k, str)(v) for k, v in row.items()}) for row in rows)


# --------------------------------------------------------------------------
# MMD


def _points(s) -> np.ndarray:
    return s.points if isinstance(s, SampleBatch) else np.asarray(s, dtype=float)


def median_bandwidth(*samples) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    pooled = np.concatenate([_points(s) for s in samples], axis=0)
    if len(pooled) < 2:
        raise TooFewSamples("need at least two points for the median heuristic")
    h = float(np.median(pdist(pooled)))
    if not h > 0:
        raise InvalidInput("median pairwise distance is zero")
    return h


def _kernel_sum(a, b, gamma, same):
    k = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    s = k.sum()
    if same:
        s -= np.trace(k)
    return s


def mmd(X, Y, bandwidth: Union[str, float] = "median_heuristic") -> float:
    """Unbiased squared MMD with kernel ``exp(-|a - b|^2 / (2 h^2))``.

    ``bandwidth`` is ``"median_heuristic"`` or a fixed positive ``h``. The
    two arguments are put in a canonical order first, so the result is
    exactly symmetric under swapping them.
    """
    x, y = _points(X), _points(Y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise InvalidInput("samples must be 2-D arrays of equal dimension")
    if len(x) < 2 or len(y) < 2:
        raise TooFewSamples("MMD needs at least two samples on each side")
    if hashlib.sha1(x.tobytes()).digest() > hashlib.sha1(y.tobytes()).digest():
        x, y = y, x
    if isinstance(bandwidth, str):
        if bandwidth not in ("median_heuristic", "median"):
            raise InvalidInput(f"unknown bandwidth rule {bandwidth!r}")
        h = median_bandwidth(x, y)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise InvalidInput("bandwidth must be positive")
    gamma = 1.0 / (2.0 * h * h)
    n, m = len(x), len(y)
    kxx = _kernel_sum(x, x, gamma, True) / (n * (n - 1))
    kyy = _kernel_sum(y, y, gamma, True) / (m * (m - 1))
    kxy = _kernel_sum(x, y, gamma, False) / (n * m)
    return float(kxx + kyy - 2.0 * kxy)


# --------------------------------------------------------------------------
# bootstrap


def bootstrap_mean_ci(values: Sequence[float], R: int = 1000, alpha: float = 0.05, seed: int = 0):
    """Mean of ``values`` and its percentile bootstrap interval."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise NoMatchedUnits("nothing to bootstrap")
    if R < 100:
        raise InvalidInput("use at least 100 bootstrap replicates")
    if not 0 < alpha < 1:
        raise InvalidInput("alpha must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(R, v.size))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(v.mean()), float(lo), float(hi)


def match_units(a: Iterable[MetricRecord], b: Iterable[MetricRecord]):
    """Pair records by evaluation unit; returns (units, values_a, values_b) sorted by unit."""
    da, db = {}, {}
    for src, dst in ((a, da), (b, db)):
        for r in src:
            if r.unit in dst:
                raise InvalidInput(f"two records share the evaluation unit {r.unit}")
            dst[r.unit] = r.value
    units = sorted(set(da) & set(db), key=lambda u: tuple(str(x) for x in u))
    if not units:
        raise NoMatchedUnits("no evaluation unit appears in both record sets")
    return units, np.array([da[u] for u in units]), np.array([db[u] for u in units])


def paired_bootstrap(a: Iterable[MetricRecord], b: Iterable[MetricRecord], R: int = 1000, alpha: float = 0.05, seed: int = 0):
    """Mean paired difference ``b - a`` over matched units with a percentile CI.

    Units are matched on (seed, scenario, sigma0, nfe, solver, metric), so
    record order does not matter.
    """
    _, va, vb = match_units(a, b)
    return bootstrap_mean_ci(vb - va, R, alpha, seed)


def improvement_pct(baseline: Iterable[MetricRecord], candidate: Iterable[MetricRecord]):
    """Per-unit ``100 * (baseline - candidate) / baseline``; positive means candidate is lower."""
    units, vb, vc = match_units(baseline, candidate)
    if np.any(vb == 0):
        raise InvalidInput("baseline metric is zero in some unit")
    return units, 100.0 * (vb - vc) / vb


# --------------------------------------------------------------------------
# DTW


def dtw_align(grid_a: TimeGrid, grid_b: TimeGrid):
    """Dynamic-time-warping distance between node sequences, with |a_i - b_j| cost.

    Returns the accumulated cost and the optimal monotone path from (0, 0) to
    (N_a, N_b) as a list of index pairs. Ties prefer the diagonal move.
    """
    return dtw_sequences(validate_grid(grid_a).nodes, validate_grid(grid_b).nodes)


def dtw_sequences(a, b):
    """DTW on raw 1-D sequences; repeated values are allowed here."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidInput("DTW needs non-empty sequences")
    na, nb = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :])
    D = np.full((na + 1, nb + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, na + 1):
        for j in range(1, nb + 1):
            D[i, j] = cost[i - 1, j - 1] + min(D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])
    i, j = na, nb
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        moves = [(D[i - 1, j - 1], i - 1, j - 1), (D[i - 1, j], i - 1, j), (D[i, j - 1], i, j - 1)]
        _, i, j = min(moves, key=lambda m: m[0])
        path.append((i - 1, j - 1))
    return float(D[na, nb]), path[::-1]


def record_dicts(results: ResultsSet) -> list:
    return [asdict(r) for r in results]
