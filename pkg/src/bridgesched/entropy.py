"""Conditional-marginal entropy-rate estimation.

The rate at time s is ``|E[div v_s(X | Z)] - E[div vbar_s(X)]|``, the magnitude of
``d/ds H(Z | X_s)``. Divergences come from Hutchinson probes pushed through
Jacobian-vector products (exact when the field provides them, central
differences otherwise). Random streams are derived from ``(seed, mesh index)``
so a time slice always sees the same draws no matter how work is split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bridges import BridgeMixture
from .core import FieldHandle, RateCurve, SampleBatch
from .errors import (
    DegenerateCoupling,
    EmptyTimeSlice,
    InvalidInput,
    NonFiniteField,
    ScoreMismatch,
)

_FD_SCALE = np.sqrt(np.finfo(float).eps)


@dataclass(frozen=True)
class ProbeConfig:
    count: int = 4
    distribution: str = "rademacher"
    seed: int = 0
    shared_across_fields: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise InvalidInput("probe count must be positive")
        if self.distribution not in ("rademacher", "gaussian"):
            raise InvalidInput(f"unknown probe distribution {self.distribution!r}")

    def to_json(self):
        return {"count": self.count, "distribution": self.distribution, "seed": self.seed,
                "shared_across_fields": self.shared_across_fields}


def draw_probes(config: ProbeConfig, n: int, d: int, rng) -> np.ndarray:
    """(n, m, d) probes with identity second moment."""
    shape = (n, config.count, d)
    if config.distribution == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    return rng.standard_normal(shape)


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Paired (state, condition, time) records on a monotone mesh.

    ``states[j]`` and ``pairs[j]`` hold the n records attached to ``mesh[j]``.
    """

    mesh: np.ndarray
    states: np.ndarray
    pairs: np.ndarray
    mixture: BridgeMixture
    seed: int = 0
    eps: float = 1e-3

    def __post_init__(self):
        mesh = np.asarray(self.mesh, dtype=float)
        if mesh.ndim != 1 or len(mesh) < 1:
            raise InvalidInput("calibration mesh must be a non-empty 1-D array")
        if np.any(np.diff(mesh) <= 0) or mesh[0] <= 0 or mesh[-1] >= 1:
            raise InvalidInput("calibration mesh must be strictly increasing inside (0, 1)")
        if self.states.shape[:2] != self.pairs.shape[:2] or self.states.shape[0] != len(mesh):
            raise InvalidInput("states/pairs must be laid out as (M, n, ...)")
        n0, n1 = self.mixture.sources.n, self.mixture.targets.n
        if self.pairs.size and (self.pairs[..., 0].max() >= n0 or self.pairs[..., 1].max() >= n1):
            raise InvalidInput("condition index out of range for the attached mixture")

    @property
    def size(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def to_json(self, include_states: bool = False) -> dict:
        d = {
            "version": 1,
            "mesh": [float(s) for s in self.mesh],
            "states_per_time": int(self.size),
            "dim": int(self.dim),
            "eps": float(self.eps),
            "seed": int(self.seed),
            "seed_lineage": "numpy default_rng([seed, mesh_index]) per time slice",
        }
        if include_states:
            d["states"] = self.states.tolist()
            d["pairs"] = self.pairs.tolist()
        return d


def uniform_mesh(M: int, eps: float) -> np.ndarray:
    if not 0 < eps < 0.5:
        raise InvalidInput(f"eps must lie in (0, 0.5), got {eps}")
    if M < 2:
        raise InvalidInput(f"mesh needs at least 2 points, got {M}")
    return np.linspace(eps, 1.0 - eps, M)


def build_calibration_set(mix: BridgeMixture, M: int = 50, eps: float = 1e-3, n: int = 256, seed: int = 0) -> CalibrationSet:
    """Uniform mesh on [eps, 1 - eps]; per time, n coupled pairs and bridge states."""
    if n < 1:
        raise InvalidInput("states_per_time must be >= 1")
    if mix.coupling.sum() <= 0:
        raise DegenerateCoupling("coupling has zero total mass")
    mesh = uniform_mesh(M, eps)
    states = np.empty((M, n, mix.dim))
    pairs = np.empty((M, n, 2), dtype=int)
    for j, s in enumerate(mesh):
        rng = np.random.default_rng([seed, j])
        pairs[j] = mix.sample_pairs(n, rng)
        states[j] = mix.sample_states(pairs[j], s, rng)
    return CalibrationSet(mesh, states, pairs, mix, seed, eps)


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _jvp(field: FieldHandle, x, t, u):
    if field.jvp is not None:
        return np.asarray(field.jvp(x, t, u), dtype=float)
    h = _FD_SCALE * (1.0 + np.abs(x).max(axis=1, keepdims=True))
    return (field.fn(x + h * u, t) - field.fn(x - h * u, t)) / (2.0 * h)


def hutchinson_divergence(field: FieldHandle, x, t, probes, rng=None, *, finite_difference: bool = False):
    """Hutchinson estimate of ``div field(x, t)``.

    ``probes`` is either a :class:`ProbeConfig` (draws from ``rng`` or from the
    config seed) or an explicit array of shape (n, m, d) / (m, d). Returns the
    per-row estimate and the (n, m) per-probe values ``u^T J u``.
    """
    x, single = _as_rows(x)
    n, d = x.shape
    if d != field.dim:
        raise InvalidInput(f"field dimension {field.dim} != state dimension {d}")
    if isinstance(probes, ProbeConfig):
        rng = rng if rng is not None else np.random.default_rng(probes.seed)
        u = draw_probes(probes, n, d, rng)
    else:
        u = np.asarray(probes, dtype=float)
        if u.ndim == 2:
            u = np.broadcast_to(u, (n,) + u.shape)
    if finite_difference and field.jvp is not None:
        field = FieldHandle(field.fn, field.dim, None, field.name)
    per = np.empty((n, u.shape[1]))
    for ell in range(u.shape[1]):
        w = _jvp(field, x, t, u[:, ell])
        if not np.all(np.isfinite(w)):
            raise NonFiniteField(f"{field.name}: derivative product is not finite")
        per[:, ell] = (u[:, ell] * w).sum(axis=1)
    est = per.mean(axis=1)
    if single:
        return float(est[0]), per[0]
    return est, per


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyTimeSlice("no records at this mesh time")
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
    return v.mean(), se


def cond_marg_terms(
    calset: CalibrationSet,
    cond_field: Optional[Callable[[np.ndarray], FieldHandle]],
    marg_field: FieldHandle,
    probes: ProbeConfig = ProbeConfig(),
    analytic_cond: Optional[Callable] = None,
):
    """Per-record differences ``cond div - marg div`` for every mesh time, (M, n)."""
    if cond_field is None and analytic_cond is None:
        raise InvalidInput("need a conditional field or an analytic conditional divergence")
    M, n, d = calset.states.shape
    if n == 0:
        raise EmptyTimeSlice("calibration set has no states")
    diffs = np.empty((M, n))
    for j, s in enumerate(calset.mesh):
        rng = np.random.default_rng([probes.seed, j])
        x = calset.states[j]
        u = draw_probes(probes, n, d, rng)
        if analytic_cond is not None:
            c = np.broadcast_to(np.asarray(analytic_cond(d, s), dtype=float), (n,))
        else:
            c, _ = hutchinson_divergence(cond_field(calset.pairs[j]), x, s, u)
        u_marg = u if probes.shared_across_fields else draw_probes(probes, n, d, rng)
        m, _ = hutchinson_divergence(marg_field, x, s, u_marg)
        diffs[j] = c - m
    return diffs


def cond_marg_rate(
    calset: CalibrationSet,
    cond_field: Optional[Callable[[np.ndarray], FieldHandle]],
    marg_field: FieldHandle,
    probes: ProbeConfig = ProbeConfig(),
    analytic_cond: Optional[Callable] = None,
) -> RateCurve:
    """Rate ``|mean(cond div - marg div)|`` per mesh time, with standard errors.

    ``cond_field`` maps the (n, 2) condition indices of a time slice to a
    row-wise field; it is ignored when ``analytic_cond(d, t)`` is supplied.
    The same probes feed both terms unless the config says otherwise.
    """
    diffs = cond_marg_terms(calset, cond_field, marg_field, probes, analytic_cond)
    stats = [_mean_se(row) for row in diffs]
    return RateCurve(calset.mesh, [abs(m) for m, _ in stats], [se for _, se in stats])


def verify_score(score_fn, logpdf_fn, x, t, tol: float = 1e-4, h: float = 1e-4):
    """Check a score against central differences of a log density; raise on mismatch."""
    x, _ = _as_rows(x)
    s = np.asarray(score_fn(x, t), dtype=float)
    fd = np.empty_like(x)
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        fd[:, k] = (logpdf_fn(x + e, t) - logpdf_fn(x - e, t)) / (2 * h)
    err = np.abs(s - fd) / (1.0 + np.abs(fd))
    if np.max(err) > tol:
        raise ScoreMismatch(f"score disagrees with finite-difference gradient (max rel err {np.max(err):.2e})")


def score_form_rate(
    calset: CalibrationSet,
    cond_field: Callable[[np.ndarray], FieldHandle],
    cond_score: Callable[[np.ndarray], Callable],
    marg_score: Callable,
    *,
    marg_logpdf: Optional[Callable] = None,
    check_points: int = 8,
) -> RateCurve:
    """Rate from ``-E[(cond score - marg score)^T v(x | z)]``; analytic scores only.

    When ``marg_logpdf`` is given, the marginal score is verified against
    finite differences on a few states of every slice before use.
    """
    M, n, d = calset.states.shape
    vals, ses = [], []
    for j, s in enumerate(calset.mesh):
        x = calset.states[j]
        pairs = calset.pairs[j]
        if marg_logpdf is not None:
            verify_score(marg_score, marg_logpdf, x[:check_points], s)
        cs = cond_score(pairs)(x, s)
        ms = marg_score(x, s)
        v = cond_field(pairs)(x, s)
        m, se = _mean_se(-((cs - ms) * v).sum(axis=1))
        vals.append(abs(m))
        ses.append(se)
    return RateCurve(calset.mesh, vals, ses)


def marginal_entropy_rate(marg_field: FieldHandle, samples, t, probes: ProbeConfig = ProbeConfig(), *, return_stderr: bool = False):
    """Monte-Carlo estimate of ``d/dt H(X_t) = E[div vbar_t(X_t)]``."""
    x = samples.points if isinstance(samples, SampleBatch) else np.asarray(samples, dtype=float)
    rng = np.random.default_rng(probes.seed)
    est, _ = hutchinson_divergence(marg_field, x, t, probes, rng)
    m, se = _mean_se(np.atleast_1d(est))
    return (float(m), float(se)) if return_stderr else float(m)


def bridge_score_factory(mix: BridgeMixture):
    """Conditional Brownian-bridge scores for row-wise conditions."""

    def make(pairs):
        x0, x1 = mix.endpoints(pairs)

        def score(x, t):
            return ((1 - t) * x0 + t * x1 - x) / (mix.sigma0**2 * t * (1 - t))

        return score

    return make
