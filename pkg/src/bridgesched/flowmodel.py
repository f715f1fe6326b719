"""Synthetic 2-D transport scenarios and a small residual vector field.

The field is ``v(x, t) = x + gate * net(x, t)`` with ``net`` a two-hidden-layer
tanh MLP on ``(x, t)``. Training regresses it onto conditional bridge
velocities (conditional flow matching), so it learns the marginal field.
Derivative-vector products are exact: a dual number is pushed through every
layer with the time input held fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .bridges import BridgeMixture, bb_flow_divergence, contraction_coeff
from .core import FieldHandle, RateCurve, SampleBatch
from .dual import Dual
from .entropy import CalibrationSet, ProbeConfig, cond_marg_rate
from .errors import DivergedTraining, InvalidInput, NonFiniteParams

SCENARIOS = ("CC", "CD", "DC", "DD")
_SPREAD = 0.05


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "CC"
    sigma0: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise InvalidInput(f"scenario must be one of {SCENARIOS}, got {self.kind!r}")
        if not self.sigma0 > 0:
            raise InvalidInput("sigma0 must be positive")


def _gaussian(rng, n, mean=(0.0, 0.0)):
    return rng.standard_normal((n, 2)) + np.asarray(mean)


def _atoms(rng, n, centers):
    k = rng.integers(0, len(centers), size=n)
    return centers[k] + _SPREAD * rng.standard_normal((n, 2))


_CORNERS = np.array([[3.0, 3.0], [3.0, -3.0], [-3.0, 3.0], [-3.0, -3.0]])


def _ring(offset=0.0):
    ang = 2 * np.pi * np.arange(8) / 8 + offset
    return 3.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def scenario_sampler(spec: ScenarioSpec, n: int, endpoint: str = "source") -> SampleBatch:
    """Endpoint samples for one of the four transport geometries.

    CC: N(0, I) -> N((4, 0), I). CD: N(0, I) -> four tight clusters at
    (+-3, +-3). DC: the reverse of CD. DD: eight-point ring of radius 3 ->
    the same ring rotated by pi/8. Clusters have standard deviation 0.05.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    if endpoint not in ("source", "target"):
        raise InvalidInput(f"endpoint must be 'source' or 'target', got {endpoint!r}")
    side = 0 if endpoint == "source" else 1
    rng = np.random.default_rng([spec.seed, side])
    kind = spec.kind
    if kind == "CC":
        pts = _gaussian(rng, n, (4.0, 0.0) if side else (0.0, 0.0))
    elif kind == "CD":
        pts = _atoms(rng, n, _CORNERS) if side else _gaussian(rng, n)
    elif kind == "DC":
        pts = _gaussian(rng, n) if side else _atoms(rng, n, _CORNERS)
    else:
        pts = _atoms(rng, n, _ring(np.pi / 8 if side else 0.0))
    return SampleBatch(pts, seed=(spec.seed, endpoint))


def scenario_mixture(spec: ScenarioSpec, n: int = 256) -> BridgeMixture:
    """Entropic-OT bridge mixture on n source and n target samples."""
    return BridgeMixture.from_samples(
        scenario_sampler(spec, n, "source"), scenario_sampler(spec, n, "target"), spec.sigma0
    )


# --------------------------------------------------------------------------
# residual field

_TENSORS = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True, eq=False)
class ResidualFieldParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    gate: float = 1.0
    residual: bool = True

    @property
    def dim(self) -> int:
        return self.W3.shape[1]

    @property
    def hidden(self) -> int:
        return self.W2.shape[0]

    def check(self):
        if self.W1.shape != (self.dim + 1, self.hidden) or self.W2.shape != (self.hidden, self.hidden):
            raise InvalidInput("inconsistent layer shapes")
        for name in _TENSORS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteParams(f"parameter {name} is not finite")
        if not np.isfinite(self.gate):
            raise NonFiniteParams("gate is not finite")
        return self

    def to_json(self) -> dict:
        return {
            "version": 1,
            "arch": {"dim": self.dim, "hidden": self.hidden, "activation": "tanh",
                     "residual": self.residual},
            "gate": float(self.gate),
            "tensors": {k: {"shape": list(getattr(self, k).shape),
                            "data": getattr(self, k).ravel().tolist()} for k in _TENSORS},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ResidualFieldParams":
        if d.get("version") != 1:
            raise InvalidInput("unsupported parameter container version")
        ts = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["tensors"].items()}
        return cls(**ts, gate=float(d["gate"]), residual=bool(d["arch"].get("residual", True))).check()


def init_params(dim: int = 2, hidden: int = 64, seed: int = 0, residual: bool = True) -> ResidualFieldParams:
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))

    return ResidualFieldParams(
        glorot(dim + 1, hidden), np.zeros(hidden),
        glorot(hidden, hidden), np.zeros(hidden),
        glorot(hidden, dim), np.zeros(dim),
        gate=1.0, residual=residual,
    )


def _inputs(x, t):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    tcol = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
    return x, np.concatenate([x, tcol], axis=1), single


def model_field(params: ResidualFieldParams, x, t):
    x, z, single = _inputs(x, t)
    a1 = np.tanh(z @ params.W1 + params.b1)
    a2 = np.tanh(a1 @ params.W2 + params.b2)
    out = params.gate * (a2 @ params.W3 + params.b3)
    if params.residual:
        out = out + x
    return out[0] if single else out


def model_jvp(params: ResidualFieldParams, x, t, u):
    """Exact ``(dv/dx) u`` by forward-mode propagation; t carries no tangent."""
    x, z, single = _inputs(x, t)
    u = np.asarray(u, dtype=float).reshape(x.shape)
    dz = np.concatenate([u, np.zeros((x.shape[0], 1))], axis=1)
    h = Dual(z, dz)
    h = (h @ params.W1 + params.b1).tanh()
    h = (h @ params.W2 + params.b2).tanh()
    out = (h @ params.W3 + params.b3) * params.gate
    tangent = out.t + u if params.residual else out.t
    return tangent[0] if single else tangent


def model_handle(params: ResidualFieldParams, name: str = "residual-field") -> FieldHandle:
    return FieldHandle(
        lambda x, t: model_field(params, x, t),
        params.dim,
        lambda x, t, u: model_jvp(params, x, t, u),
        name=name,
    )


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 64
    lr: float = 1e-3
    batch: int = 256
    steps: int = 5000
    seed: int = 0
    momentum: float = 0.9
    eps: float = 1e-3
    clip: Optional[float] = 10.0
    target: str = "flow"  # "flow": bridge velocity; "noise": standardised bridge noise

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _loss_and_grads(p: ResidualFieldParams, x, t, y):
    B = x.shape[0]
    z = np.concatenate([x, t[:, None]], axis=1)
    a1 = np.tanh(z @ p.W1 + p.b1)
    a2 = np.tanh(a1 @ p.W2 + p.b2)
    o = a2 @ p.W3 + p.b3
    v = p.gate * o + (x if p.residual else 0.0)
    r = v - y
    loss = float((r * r).sum() / B)
    dv = 2.0 * r / B
    g = {"gate": float((dv * o).sum())}
    do = p.gate * dv
    g["W3"] = a2.T @ do
    g["b3"] = do.sum(0)
    dh2 = (do @ p.W3.T) * (1.0 - a2 * a2)
    g["W2"] = a1.T @ dh2
    g["b2"] = dh2.sum(0)
    dh1 = (dh2 @ p.W2.T) * (1.0 - a1 * a1)
    g["W1"] = z.T @ dh1
    g["b1"] = dh1.sum(0)
    return loss, g


def cfm_batch(mix: BridgeMixture, batch: int, eps: float, rng, target: str = "flow"):
    """One (x_t, t, regression target) batch drawn through the coupling."""
    t = rng.uniform(eps, 1.0 - eps, size=batch)
    pairs = mix.sample_pairs(batch, rng)
    x0, x1 = mix.endpoints(pairs)
    tc = t[:, None]
    g = rng.standard_normal(x0.shape)
    sig = mix.sigma0 * np.sqrt(tc * (1.0 - tc))
    xt = (1.0 - tc) * x0 + tc * x1 + sig * g
    if target == "flow":
        y = (x1 - x0) + contraction_coeff(tc) * sig * g
    elif target == "noise":
        y = g
    else:
        raise InvalidInput(f"unknown training target {target!r}")
    return xt, t, y


def cfm_train(spec: Optional[ScenarioSpec], mix: BridgeMixture, hyper: TrainConfig = TrainConfig()):
    """Conditional flow matching with momentum SGD.

    Returns the trained parameters and the per-step mini-batch loss. Fully
    deterministic given ``hyper.seed``.
    """
    residual = hyper.target == "flow"
    params = init_params(mix.dim, hyper.hidden, hyper.seed, residual=residual)
    if hyper.steps == 0:
        return params, np.zeros(0)
    rng = np.random.default_rng([hyper.seed, 1])
    state = {k: np.array(getattr(params, k)) for k in _TENSORS}
    state["gate"] = np.array(params.gate)
    vel = {k: np.zeros_like(v) for k, v in state.items()}
    history = np.empty(hyper.steps)
    for step in range(hyper.steps):
        x, t, y = cfm_batch(mix, hyper.batch, hyper.eps, rng, hyper.target)
        cur = ResidualFieldParams(**{k: state[k] for k in _TENSORS}, gate=float(state["gate"]), residual=residual)
        loss, grads = _loss_and_grads(cur, x, t, y)
        if not np.isfinite(loss):
            raise DivergedTraining(f"loss became {loss} at step {step}")
        history[step] = loss
        if hyper.clip is not None:
            norm = np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
            if norm > hyper.clip:
                grads = {k: g * (hyper.clip / norm) for k, g in grads.items()}
        for k in state:
            vel[k] = hyper.momentum * vel[k] + grads[k]
            state[k] = state[k] - hyper.lr * vel[k]
    params = ResidualFieldParams(**{k: state[k] for k in _TENSORS}, gate=float(state["gate"]), residual=residual)
    return params.check(), history


def learned_rate_profile(params: ResidualFieldParams, mix: BridgeMixture, calset: CalibrationSet, probes: ProbeConfig = ProbeConfig()) -> RateCurve:
    """Cond-marg rate with the analytic bridge divergence against the learned field."""
    return cond_marg_rate(calset, None, model_handle(params), probes, analytic_cond=bb_flow_divergence)


def _noise_scale(t, sigma0):
    t = np.asarray(t, dtype=float)
    tc = t if t.ndim == 0 else t[:, None]
    return sigma0 / (2.0 * np.sqrt(tc * (1.0 - tc)))


def learned_sde_drift(flow: ResidualFieldParams, noise: ResidualFieldParams, sigma0: float, direction: str = "reverse") -> FieldHandle:
    """Marginal SDE drift from a learned flow field and a learned noise predictor.

    With ``eps(x, t) ~ E[(x - m_t) / sigma(t) | X_t = x]`` the score is
    ``-eps / sigma(t)``, so the drifts are ``v +- sigma0 * eps / (2 sqrt(t (1 - t)))``
    (``+`` for integrating backwards in time, ``-`` forwards).
    """
    sign = 1.0 if direction == "reverse" else -1.0

    def fn(x, t):
        return model_field(flow, x, t) + sign * _noise_scale(t, sigma0) * model_field(noise, x, t)

    return FieldHandle(fn, flow.dim, name=f"learned-{direction}-drift")


def save_params(params: ResidualFieldParams, path):
    with open(path, "w") as fh:
        json.dump(params.to_json(), fh)


def load_params(path) -> ResidualFieldParams:
    with open(path) as fh:
        return ResidualFieldParams.from_json(json.load(fh))
