"""Brownian bridges, their entropic-OT mixtures, and exact mixture marginals.

Everything here is closed form and serves as the ground truth that the
estimators in :mod:`bridgesched.entropy` are checked against. Bridges run from
``x0`` at t = 0 to ``x1`` at t = 1 with marginal ``N(m_t, sigma0^2 t (1 - t) I)``,
``m_t = (1 - t) x0 + t x1``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import FieldHandle, SampleBatch
from .errors import (
    DegenerateCoupling,
    DegenerateInput,
    InvalidInput,
    NonpositiveSigma,
    NotConverged,
    TimeOutOfDomain,
    TimeOutOfOpenInterval,
    UnderflowAllComponents,
)

EPS_MIN = 1e-6
DENSITY_FLOOR = 1e-300
_LOG_FLOOR = math.log(DENSITY_FLOOR)


def _open_time(t, eps=EPS_MIN):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t <= 0.0) or np.any(t >= 1.0):
        raise TimeOutOfOpenInterval(f"time must lie in (0, 1), got {t}")
    return np.clip(t, eps, 1.0 - eps)


def _col(t):
    """Scalar stays scalar; a length-n time vector becomes an (n, 1) column."""
    t = np.asarray(t, dtype=float)
    return t if t.ndim == 0 else t[:, None]


@dataclass(frozen=True, eq=False)
class BrownianBridgeSpec:
    x0: np.ndarray
    x1: np.ndarray
    sigma0: float = 1.0

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        x1 = np.atleast_1d(np.asarray(self.x1, dtype=float))
        if x0.shape != x1.shape:
            raise InvalidInput("bridge endpoints must have equal dimension")
        if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
            raise InvalidInput("bridge endpoints must be finite")
        if not self.sigma0 > 0:
            raise NonpositiveSigma(f"sigma0 must be positive, got {self.sigma0}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)

    @property
    def dim(self) -> int:
        return self.x0.shape[-1]


def contraction_coeff(t):
    """(1 - 2t) / (2 t (1 - t)): the x-coefficient of the probability-flow field."""
    return (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t))


def bb_moments(spec: BrownianBridgeSpec, t):
    t = _open_time(t)
    tc = _col(t)
    mean = (1.0 - tc) * spec.x0 + tc * spec.x1
    return mean, spec.sigma0 * np.sqrt(t * (1.0 - t))


def bb_flow_field(spec: BrownianBridgeSpec, x, t):
    """Probability-flow field of the bridge; sigma0 drops out."""
    t = _open_time(t)
    tc = _col(t)
    m = (1.0 - tc) * spec.x0 + tc * spec.x1
    return (spec.x1 - spec.x0) + contraction_coeff(tc) * (np.asarray(x, dtype=float) - m)


def bb_flow_divergence(d: int, t):
    t = _open_time(t)
    return d * contraction_coeff(t)


def bb_sde_drift(spec: BrownianBridgeSpec, x, t):
    """Conditional drift ``(x1 - x0) + (1 - 2t)/(t (1 - t)) (x - m_t)``.

    Equal to ``2 * bb_flow_field - (x1 - x0)``. Note this is *not* a
    marginal-preserving drift for ``dX = u dt + sigma0 dW``; use
    :func:`bb_doob_drift` to simulate the bridge forward.
    """
    t = _open_time(t)
    tc = _col(t)
    m = (1.0 - tc) * spec.x0 + tc * spec.x1
    return (spec.x1 - spec.x0) + 2.0 * contraction_coeff(tc) * (np.asarray(x, dtype=float) - m)


def bb_doob_drift(spec: BrownianBridgeSpec, x, t):
    """Forward pinned drift ``(x1 - x) / (1 - t)`` for ``dX = u dt + sigma0 dW``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t >= 1.0):
        raise TimeOutOfDomain(f"forward bridge drift needs t in [0, 1), got {t}")
    return (spec.x1 - np.asarray(x, dtype=float)) / (1.0 - _col(t))


def bb_reverse_drift(spec: BrownianBridgeSpec, x, t):
    """Time-reversed pinned drift ``(x - x0) / t``, integrated on decreasing grids."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise TimeOutOfDomain(f"reverse bridge drift needs t in (0, 1], got {t}")
    return (np.asarray(x, dtype=float) - spec.x0) / _col(t)


def bb_cond_score(spec: BrownianBridgeSpec, x, t):
    t = _open_time(t)
    tc = _col(t)
    m = (1.0 - tc) * spec.x0 + tc * spec.x1
    return (m - np.asarray(x, dtype=float)) / (spec.sigma0**2 * tc * (1.0 - tc))


def naive_probability_flow(spec: BrownianBridgeSpec, x, t):
    """Marginal probability-flow recipe applied to conditional objects.

    ``u + sigma0^2 (1 - 2t) grad log p(x | x0, x1)`` collapses to the constant
    ``x1 - x0`` and loses the contraction term; kept as a regression target.
    """
    t = _open_time(t)
    tc = _col(t)
    return bb_sde_drift(spec, x, t) + spec.sigma0**2 * (1.0 - 2.0 * tc) * bb_cond_score(spec, x, t)


def gaussian_path_velocity(mu, dmu, sigma, dsigma, x):
    """Velocity of ``X = mu + sigma * eps`` expressed in terms of the state."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise NonpositiveSigma(f"sigma must be positive, got {sigma}")
    mu = np.asarray(mu, dtype=float)
    return np.asarray(dmu, dtype=float) + np.asarray(dsigma, dtype=float) * (np.asarray(x, dtype=float) - mu) / sigma


def _closed_time(t, eps=EPS_MIN):
    """Accept t in [0, 1]; returns (t, t clipped away from the endpoints)."""
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise TimeOutOfDomain(f"time must lie in [0, 1], got {t}")
    return t, np.clip(t, eps, 1.0 - eps)


def _paired_fn(x0, x1):
    # the mean is taken at the true time and only the contraction coefficient
    # is clipped, so the mean line stays invariant up to the grid endpoints
    def fn(x, t):
        t, tc = _closed_time(t)
        return (x1 - x0) + contraction_coeff(_col(tc)) * (np.asarray(x, dtype=float) - ((1.0 - _col(t)) * x0 + _col(t) * x1))

    def jvp(x, t, u):
        return contraction_coeff(_col(_closed_time(t)[1])) * np.asarray(u, dtype=float)

    return fn, jvp


def bridge_field_handle(spec: BrownianBridgeSpec) -> FieldHandle:
    """Single-bridge flow field with its exact Jacobian ``c(t) I``; usable on [0, 1]."""
    fn, jvp = _paired_fn(spec.x0, spec.x1)
    return FieldHandle(fn, spec.dim, jvp, name="bridge")


def paired_bridge_field(x0, x1) -> FieldHandle:
    """Row-wise bridge field: row i is conditioned on ``(x0[i], x1[i])``."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    fn, jvp = _paired_fn(x0, x1)
    return FieldHandle(fn, x0.shape[-1], jvp, name="paired-bridge")


# --------------------------------------------------------------------------
# entropic optimal transport


def _sq_cost(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def round_to_marginals(plan, mu, nu):
    """Project a near-feasible plan onto exact marginals (rank-one correction)."""
    p = np.array(plan, dtype=float)
    rs = p.sum(1)
    p *= np.minimum(1.0, np.divide(mu, rs, out=np.ones_like(mu), where=rs > 0))[:, None]
    cs = p.sum(0)
    p *= np.minimum(1.0, np.divide(nu, cs, out=np.ones_like(nu), where=cs > 0))[None, :]
    er = np.maximum(mu - p.sum(1), 0.0)
    ec = np.maximum(nu - p.sum(0), 0.0)
    tot = er.sum()
    if tot > 0:
        p += np.outer(er, ec) / tot
    return p


def sinkhorn_coupling(
    sources,
    targets,
    epsilon_ot=None,
    tol: float = 1e-9,
    max_iter: int = 20000,
    *,
    sigma0=None,
    scaling: bool = True,
    round_plan: bool = False,
    strict: bool = False,
):
    """Entropic OT plan between uniformly weighted point clouds.

    Log-domain Sinkhorn on squared Euclidean cost. ``epsilon_ot`` defaults to
    ``2 * sigma0**2``. Iterates until the L1 violation of the row marginal
    (columns are exact after each half-step) drops to ``tol``; with
    ``scaling`` the regularisation is annealed from the cost scale down to
    ``epsilon_ot`` first. ``round_plan`` finishes with an exact projection
    onto the marginals.
    """
    a = np.asarray(getattr(sources, "points", sources), dtype=float)
    b = np.asarray(getattr(targets, "points", targets), dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DegenerateInput("sinkhorn needs at least one source and one target")
    if epsilon_ot is None:
        if sigma0 is None:
            raise InvalidInput("pass epsilon_ot or sigma0")
        epsilon_ot = 2.0 * sigma0**2
    if not epsilon_ot > 0:
        raise InvalidInput(f"epsilon_ot must be positive, got {epsilon_ot}")
    n0, n1 = a.shape[0], b.shape[0]
    mu = np.full(n0, 1.0 / n0)
    nu = np.full(n1, 1.0 / n1)
    log_mu, log_nu = np.log(mu), np.log(nu)
    cost = _sq_cost(a, b)

    f = np.zeros(n0)
    g = np.zeros(n1)
    eps_sched = [epsilon_ot]
    if scaling:
        e = max(float(cost.max()), epsilon_ot)
        eps_sched = []
        while e > epsilon_ot:
            eps_sched.append(e)
            e *= 0.5
        eps_sched.append(epsilon_ot)

    violation = np.inf
    it = 0
    for k, eps in enumerate(eps_sched):
        last = k == len(eps_sched) - 1
        budget = max_iter if last else 50
        for _ in range(budget):
            f = eps * (log_mu - logsumexp((g[None, :] - cost) / eps, axis=1))
            g = eps * (log_nu - logsumexp((f[:, None] - cost) / eps, axis=0))
            it += 1
            if last and it % 5 == 0:
                plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
                violation = float(np.abs(plan.sum(1) - mu).sum())
                if violation <= tol:
                    break
    plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon_ot)
    violation = float(np.abs(plan.sum(1) - mu).sum() + np.abs(plan.sum(0) - nu).sum())
    if violation > tol:
        msg = f"sinkhorn stopped at marginal violation {violation:.3e} > tol {tol:.1e}"
        if strict:
            raise NotConverged(msg, coupling=plan, violation=violation, iterations=it)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if round_plan:
        plan = round_to_marginals(plan, mu, nu)
    return plan


# --------------------------------------------------------------------------
# mixtures of bridges


@dataclass(frozen=True, eq=False)
class BridgeMixture:
    """Brownian bridges between sample pairs weighted by a coupling matrix."""

    sources: SampleBatch
    targets: SampleBatch
    coupling: np.ndarray
    sigma0: float
    marginal_tol: float = 1e-8

    def __post_init__(self):
        src = self.sources if isinstance(self.sources, SampleBatch) else SampleBatch(self.sources)
        tgt = self.targets if isinstance(self.targets, SampleBatch) else SampleBatch(self.targets)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "targets", tgt)
        if src.dim != tgt.dim:
            raise InvalidInput("sources and targets must share dimension")
        if not self.sigma0 > 0:
            raise NonpositiveSigma(f"sigma0 must be positive, got {self.sigma0}")
        pi = np.array(self.coupling, dtype=float)
        if pi.shape != (src.n, tgt.n):
            raise InvalidInput(f"coupling shape {pi.shape} != ({src.n}, {tgt.n})")
        if np.any(pi < 0) or not np.all(np.isfinite(pi)):
            raise DegenerateCoupling("coupling entries must be finite and nonnegative")
        total = pi.sum()
        if total <= 0:
            raise DegenerateCoupling("coupling has zero total mass")
        tol = self.marginal_tol
        if abs(total - 1.0) > tol:
            raise DegenerateCoupling(f"coupling mass {total} != 1")
        if np.max(np.abs(pi.sum(1) - 1.0 / src.n)) > tol or np.max(np.abs(pi.sum(0) - 1.0 / tgt.n)) > tol:
            raise DegenerateCoupling("coupling marginals are not uniform within tolerance")
        pi.setflags(write=False)
        object.__setattr__(self, "coupling", pi)
        # sparse component list: only pairs carrying mass
        ii, jj = np.nonzero(pi)
        w = pi[ii, jj]
        object.__setattr__(self, "_pairs", np.stack([ii, jj], axis=1))
        object.__setattr__(self, "_logw", np.log(w))
        object.__setattr__(self, "_a", src.points[ii])
        object.__setattr__(self, "_b", tgt.points[jj])

    @classmethod
    def from_samples(cls, sources, targets, sigma0, epsilon_ot=None, **sinkhorn_kw):
        """Entropic-OT coupling of the two clouds, rounded onto exact marginals.

        Sinkhorn runs to an L1 row violation of 1e-5 (at most 3000 sweeps) by
        default; the rounding step absorbs the remainder.
        """
        sinkhorn_kw.setdefault("tol", 1e-5)
        sinkhorn_kw.setdefault("max_iter", 3000)
        src = sources if isinstance(sources, SampleBatch) else SampleBatch(sources)
        tgt = targets if isinstance(targets, SampleBatch) else SampleBatch(targets)
        plan = sinkhorn_coupling(src, tgt, epsilon_ot, sigma0=sigma0, round_plan=True, **sinkhorn_kw)
        return cls(src, tgt, plan, sigma0)

    @classmethod
    def single(cls, x0, x1, sigma0):
        return cls(SampleBatch(np.atleast_2d(x0)), SampleBatch(np.atleast_2d(x1)), [[1.0]], sigma0)

    @property
    def dim(self) -> int:
        return self.sources.dim

    @property
    def pairs(self) -> np.ndarray:
        """(K, 2) index pairs of components with positive weight."""
        return self._pairs

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self._logw)

    def endpoints(self, pairs):
        pairs = np.asarray(pairs)
        return self.sources.points[pairs[..., 0]], self.targets.points[pairs[..., 1]]

    def sample_pairs(self, n: int, rng) -> np.ndarray:
        k = rng.choice(len(self._pairs), size=n, p=self.weights / self.weights.sum())
        return self._pairs[k]

    def sample_states(self, pairs, t, rng):
        """Draw ``x ~ N(m_t, sigma(t)^2 I)`` for each condition row."""
        x0, x1 = self.endpoints(pairs)
        tc = _col(t)
        g = rng.standard_normal(x0.shape)
        return (1.0 - tc) * x0 + tc * x1 + self.sigma0 * np.sqrt(tc * (1.0 - tc)) * g

    def to_json(self) -> dict:
        return {
            "version": 1,
            "sigma0": float(self.sigma0),
            "sources": self.sources.points.tolist(),
            "targets": self.targets.points.tolist(),
            "coupling": self.coupling.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "BridgeMixture":
        if d.get("version") != 1:
            raise InvalidInput(f"unsupported mixture version {d.get('version')!r}")
        return cls(SampleBatch(d["sources"]), SampleBatch(d["targets"]), d["coupling"], d["sigma0"])


def _rows(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return (x.reshape(1, d) if single else x), single


def _chunks(n, k, d, budget=2_000_000):
    step = max(1, budget // max(1, k * d))
    for s in range(0, n, step):
        yield slice(s, min(n, s + step))


def _posterior(mix: BridgeMixture, x, t, strict=True):
    """Posterior weights over components plus the per-row log density.

    Returns (w (n, K), logp (n,), means (n, K, d) or (K, d), sigma2 (n,) or ()).
    """
    d = mix.dim
    a, b, lw = mix._a, mix._b, mix._logw
    tt = np.broadcast_to(_open_time(t), (x.shape[0],)) if np.ndim(t) else _open_time(t)
    if np.ndim(tt) == 0:
        means = (1.0 - tt) * a + tt * b  # (K, d)
        s2 = mix.sigma0**2 * tt * (1.0 - tt)
        sq = ((x[:, None, :] - means[None]) ** 2).sum(-1)
    else:
        tc = tt[:, None, None]
        means = (1.0 - tc) * a[None] + tc * b[None]  # (n, K, d)
        s2 = mix.sigma0**2 * tt * (1.0 - tt)
        sq = ((x[:, None, :] - means) ** 2).sum(-1)
    s2c = s2 if np.ndim(s2) == 0 else s2[:, None]
    logc = lw[None, :] - sq / (2.0 * s2c) - 0.5 * d * np.log(2.0 * np.pi * s2c)
    mx = logc.max(axis=1)
    if strict and np.any(mx < _LOG_FLOOR):
        raise UnderflowAllComponents("every mixture component density is below 1e-300")
    logp = logsumexp(logc, axis=1)
    w = np.exp(logc - logp[:, None])
    return w, logp, means, s2


def mixture_log_density(mix: BridgeMixture, x, t):
    x, single = _rows(x, mix.dim)
    out = np.empty(x.shape[0])
    tarr = np.asarray(t, dtype=float)
    for sl in _chunks(x.shape[0], len(mix._logw), mix.dim):
        tt = tarr if tarr.ndim == 0 else tarr[sl]
        out[sl] = _posterior(mix, x[sl], tt, strict=False)[1]
    return out[0] if single else out


def mixture_marginal_density(mix: BridgeMixture, x, t):
    """Marginal density at time t, floored at 1e-300."""
    return np.maximum(np.exp(mixture_log_density(mix, x, t)), DENSITY_FLOOR)


def mixture_posterior_weights(mix: BridgeMixture, x, t, strict=True):
    x, single = _rows(x, mix.dim)
    w = _posterior(mix, x, t, strict=strict)[0]
    return w[0] if single else w


def _mixture_eval(mix, x, t, what, u=None, strict=True):
    x, single = _rows(x, mix.dim)
    if u is not None:
        u, _ = _rows(u, mix.dim)
    out = np.empty_like(x)
    tarr = np.asarray(t, dtype=float)
    vel = mix._b - mix._a  # (K, d)
    for sl in _chunks(x.shape[0], len(mix._logw), mix.dim):
        tt = tarr if tarr.ndim == 0 else tarr[sl]
        xs = x[sl]
        w, _, means, s2 = _posterior(mix, xs, tt, strict=strict)
        if means.ndim == 2:
            mbar = w @ means
        else:
            mbar = np.einsum("nk,nkd->nd", w, means)
        s2c = s2 if np.ndim(s2) == 0 else s2[:, None]
        if what == "score":
            out[sl] = (mbar - xs) / s2c
            continue
        c = contraction_coeff(_col(_open_time(tt)))
        vbar_const = w @ vel
        if what == "field":
            out[sl] = vbar_const + c * (xs - mbar)
            continue
        # jvp: c u + sum_k w_k ((m_k - mbar) . u / s2) (v_k - vbar)
        us = u[sl]
        if means.ndim == 2:
            dm = means[None] - mbar[:, None, :]
        else:
            dm = means - mbar[:, None, :]
        proj = (dm * us[:, None, :]).sum(-1) / s2c
        dv = (vel[None] - vbar_const[:, None, :]) - (c[..., None] if np.ndim(c) else c) * dm
        out[sl] = c * us + np.einsum("nk,nkd->nd", w * proj, dv)
    return out[0] if single else out


def mixture_marginal_field(mix: BridgeMixture, x, t, strict=True):
    """Posterior average of the conditional bridge flow fields."""
    return _mixture_eval(mix, x, t, "field", strict=strict)


def mixture_marginal_score(mix: BridgeMixture, x, t, strict=True):
    return _mixture_eval(mix, x, t, "score", strict=strict)


def mixture_field_jvp(mix: BridgeMixture, x, t, u, strict=True):
    """Exact Jacobian-vector product of :func:`mixture_marginal_field`."""
    return _mixture_eval(mix, x, t, "jvp", u=u, strict=strict)


def marginal_field_handle(mix: BridgeMixture, strict: bool = False) -> FieldHandle:
    return FieldHandle(
        lambda x, t: mixture_marginal_field(mix, x, t, strict=strict),
        mix.dim,
        lambda x, t, u: mixture_field_jvp(mix, x, t, u, strict=strict),
        name="mixture-marginal",
    )


def conditional_field_factory(mix: BridgeMixture):
    """Map (n, 2) condition indices to a row-wise bridge field."""

    def make(pairs):
        x0, x1 = mix.endpoints(pairs)
        return paired_bridge_field(x0, x1)

    return make


def mixture_reverse_drift_handle(mix: BridgeMixture, strict: bool = False) -> FieldHandle:
    """Marginal drift for time-reversed sampling: ``v + sigma0^2/2 * (-score)``."""

    def fn(x, t):
        return mixture_marginal_field(mix, x, t, strict) - 0.5 * mix.sigma0**2 * mixture_marginal_score(mix, x, t, strict)

    return FieldHandle(fn, mix.dim, name="mixture-reverse-drift")


def mixture_forward_drift_handle(mix: BridgeMixture, strict: bool = False) -> FieldHandle:
    def fn(x, t):
        return mixture_marginal_field(mix, x, t, strict) + 0.5 * mix.sigma0**2 * mixture_marginal_score(mix, x, t, strict)

    return FieldHandle(fn, mix.dim, name="mixture-forward-drift")


# --------------------------------------------------------------------------
# analytic divergence profiles of common interpolants

PROFILE_KINDS = ("linear_ot", "vp", "cosine", "brownian_bridge")


def analytic_profile(kind: str, t, d: int):
    t = np.asarray(t, dtype=float)
    if kind == "linear_ot":
        if np.any(t < 0) or np.any(t > 1):
            raise TimeOutOfDomain(f"t must lie in [0, 1], got {t}")
        return np.zeros_like(t) if t.ndim else 0.0
    if kind in ("vp", "cosine"):
        if np.any(t < 0) or np.any(t >= 1):
            raise TimeOutOfDomain(f"{kind} profile needs t in [0, 1), got {t}")
        if kind == "vp":
            return d * t / (1.0 - t**2)
        return d * np.pi * np.tan(np.pi * t / 2.0) / 2.0
    if kind == "brownian_bridge":
        if np.any(t <= 0) or np.any(t >= 1):
            raise TimeOutOfDomain(f"bridge profile needs t in (0, 1), got {t}")
        return bb_flow_divergence(d, t)
    raise InvalidInput(f"unknown profile kind {kind!r}; choose from {PROFILE_KINDS}")
