"""MLP policies over flat parameter vectors, plus the CIRL, pure-RL and static-PID heads.

Parameter packing is layer-major: for each layer the ``(w_in, w_out)`` weight
matrix in row-major order, then its ``w_out`` biases. Forward passes accept a
stack of parameter vectors ``(P, n)`` with inputs ``(P, E, w_in)`` so a whole
swarm can be rolled out at once.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .control import GAIN_HIGH, GAIN_LOW, PidGainSet, loop_errors, pid_apply, pid_deltas
from .errors import ProtocolError, SchemaError, ShapeError
from .sim import ACTION_HIGH, ACTION_LOW, DT, MEAS_LOW, MEAS_SPAN

CIRL = "cirl"
PURE_RL = "pure_rl"
STATIC_PID = "static_pid"


@dataclass(frozen=True)
class MlpLayout:
    n_in: int
    hidden: tuple
    n_out: int

    @property
    def widths(self):
        return (self.n_in, *self.hidden, self.n_out)

    @property
    def n_params(self):
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def to_dict(self):
        return {"input": self.n_in, "hidden": list(self.hidden), "output": self.n_out}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input"]), tuple(int(h) for h in d["hidden"]), int(d["output"]))


CIRL_LAYOUT = MlpLayout(12, (16, 16, 16), 6)
PURE_RL_LAYOUT = MlpLayout(12, (128, 128, 128), 2)
LAYOUTS = {CIRL: CIRL_LAYOUT, PURE_RL: PURE_RL_LAYOUT}


@dataclass(frozen=True)
class PolicyParams:
    vector: np.ndarray
    layout: MlpLayout
    kind: str = CIRL
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.ndim != 1 or v.size != self.layout.n_params:
            raise ShapeError(f"parameter vector has {v.size} entries, layout needs "
                             f"{self.layout.n_params}")
        object.__setattr__(self, "vector", v)


def unpack(vectors, layout: MlpLayout):
    """Split flat vector(s) into ``[(W, b), ...]``; ``W`` is ``(..., w_in, w_out)``."""
    v = np.asarray(vectors, dtype=float)
    if v.shape[-1] != layout.n_params:
        raise ShapeError(f"expected {layout.n_params} parameters, got {v.shape[-1]}")
    lead = v.shape[:-1]
    out, off = [], 0
    for a, b in zip(layout.widths[:-1], layout.widths[1:]):
        w = v[..., off:off + a * b].reshape(*lead, a, b)
        off += a * b
        out.append((w, v[..., off:off + b]))
        off += b
    return out


def pack(layers):
    return np.concatenate([np.concatenate([w.reshape(*w.shape[:-2], -1), b], axis=-1)
                           for w, b in layers], axis=-1)


def mlp_forward(params, x, layout: MlpLayout | None = None):
    """ReLU feedforward, linear output.

    ``params`` is a ``PolicyParams``, a single vector, or a ``(P, n)`` stack; with
    a stack, ``x`` must be ``(P, E, w_in)`` and the result is ``(P, E, w_out)``.
    """
    if isinstance(params, PolicyParams):
        layout, vec = params.layout, params.vector
    else:
        vec = np.asarray(params, dtype=float)
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != layout.n_in:
        raise ShapeError(f"input width {h.shape[-1]} does not match layout {layout.n_in}")
    layers = unpack(vec, layout)
    for i, (w, b) in enumerate(layers):
        if vec.ndim == 1:
            h = h @ w + b
        else:
            h = np.matmul(h, w) + b[:, None, :]
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def build_observation_vector(meas, sp=None):
    """Normalised 12-vector: [C_B, T, V] at t, t-1, t-2 then C_B* at t, t-1, t-2.

    Accepts an ``Observation`` or the raw ``(..., 3, 3)`` / ``(..., 3, 2)`` arrays.
    """
    if sp is None:
        meas, sp = meas.measured, meas.setpoints
    meas = np.asarray(meas, dtype=float)
    sp = np.asarray(sp, dtype=float)
    if meas.shape[-2:] != (3, 3) or sp.shape[-2:] != (3, 2):
        raise ProtocolError("observation must carry three steps of history")
    z = (meas - MEAS_LOW) / MEAS_SPAN
    zsp = (sp[..., 0] - MEAS_LOW[0]) / MEAS_SPAN[0]
    return np.concatenate([z.reshape(*z.shape[:-2], 9), zsp], axis=-1)


def _affine(raw, low, high):
    # raw output in [-1, 1] spans [low, high]; anything beyond is clamped
    return np.clip(low + 0.5 * (raw + 1.0) * (high - low), low, high)


def gains_from_raw(raw):
    return _affine(raw, GAIN_LOW, GAIN_HIGH)


def action_from_raw(raw):
    return _affine(raw, ACTION_LOW, ACTION_HIGH)


class CirlController:
    """Network emits six PID gains each step; a velocity PID turns them into an action."""

    kind = CIRL
    layout = CIRL_LAYOUT

    def __init__(self, vectors):
        self.vectors = np.atleast_2d(np.asarray(vectors, dtype=float))

    @property
    def n_policies(self):
        return self.vectors.shape[0]

    def act(self, meas, sp, prev_u, dt=DT):
        """All arguments carry leading ``(P, E)`` axes; returns ``(action, gains)``."""
        raw = mlp_forward(self.vectors, build_observation_vector(meas, sp), self.layout)
        gains = gains_from_raw(raw)
        u = pid_apply(prev_u, pid_deltas(gains, loop_errors(meas, sp), dt))
        return u, gains


class PureRlController:
    """Network maps the observation straight to an action."""

    kind = PURE_RL
    layout = PURE_RL_LAYOUT

    def __init__(self, vectors):
        self.vectors = np.atleast_2d(np.asarray(vectors, dtype=float))

    @property
    def n_policies(self):
        return self.vectors.shape[0]

    def act(self, meas, sp, prev_u, dt=DT):
        raw = mlp_forward(self.vectors, build_observation_vector(meas, sp), self.layout)
        return action_from_raw(raw), None


class StaticPidController:
    """Fixed gains per policy row, shape ``(P, 6)``."""

    kind = STATIC_PID

    def __init__(self, gains):
        self.gains = np.atleast_2d(np.asarray(gains, dtype=float))

    @property
    def n_policies(self):
        return self.gains.shape[0]

    def act(self, meas, sp, prev_u, dt=DT):
        g = np.broadcast_to(self.gains[:, None, :], meas.shape[:2] + (6,))
        u = pid_apply(prev_u, pid_deltas(g, loop_errors(meas, sp), dt))
        return u, g


CONTROLLERS = {CIRL: CirlController, PURE_RL: PureRlController, STATIC_PID: StaticPidController}


def make_controller(kind, vectors):
    try:
        return CONTROLLERS[kind](vectors)
    except KeyError:
        raise SchemaError(f"unknown agent kind '{kind}'") from None


def cirl_act(p: PolicyParams, obs, prev_u, dt=DT):
    """Single-step CIRL decision: ``(PidGainSet, action)``."""
    if p.kind != CIRL:
        raise ProtocolError("cirl_act needs a CIRL policy")
    meas = obs.measured[None, None]
    sp = obs.setpoints[None, None]
    u, g = CirlController(p.vector).act(meas, sp, np.asarray(prev_u, dtype=float)[None, None], dt)
    return PidGainSet.from_array(g[0, 0]), u[0, 0]


def purerl_act(p: PolicyParams, obs):
    if p.kind != PURE_RL:
        raise ProtocolError("purerl_act needs a pure-RL policy")
    raw = mlp_forward(p, build_observation_vector(obs.measured, obs.setpoints))
    return action_from_raw(raw)


def content_hash(vector):
    """Git-style blob SHA-1 over the little-endian float64 bytes."""
    data = np.asarray(vector, dtype="<f8").tobytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def policy_to_dict(p: PolicyParams):
    meta = dict(p.metadata)
    meta["content_hash"] = content_hash(p.vector)
    return {"kind": p.kind, "layout": p.layout.to_dict(),
            "params": [float(v) for v in p.vector], "metadata": meta}


def policy_from_dict(d):
    for key in ("kind", "layout", "params"):
        if key not in d:
            raise SchemaError(f"policy file is missing field '{key}'")
    p = PolicyParams(np.array(d["params"], dtype=float), MlpLayout.from_dict(d["layout"]),
                     d["kind"], dict(d.get("metadata", {})))
    expected = p.metadata.get("content_hash")
    if expected is not None and expected != content_hash(p.vector):
        raise SchemaError("policy parameters do not match their content hash")
    return p


def save_policy(p: PolicyParams, path):
    with open(path, "w") as fh:
        json.dump(policy_to_dict(p), fh, indent=1)
        fh.write("\n")


def load_policy(path):
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
