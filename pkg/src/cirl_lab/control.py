"""Two-loop PID law (velocity and position forms) and RGA pairing analysis.

Loop 0 pairs C_B with the coolant temperature, loop 1 pairs V with the inlet
flow. Errors and control increments are on normalised scales, so gains are
dimensionless here.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .errors import DomainError, NonConvergenceError, SingularityError
from .sim import (
    ACTION_HIGH, ACTION_LOW, ACTION_SPAN, C_B, CV_SPAN, DEFAULT_PARAMS, DT, SUBSTEPS, TEMP,
    VOL, CstrParams, integrate_step,
)
from .scenarios import steady_state

TAU_EPS = 1e-6

GAIN_NAMES = ("kp_cb", "ti_cb", "td_cb", "kp_v", "ti_v", "td_v")
GAIN_LOW = np.array([-5.0, 0.0, 0.0, 0.0, 0.0, 0.0])
GAIN_HIGH = np.array([25.0, 20.0, 10.0, 1.0, 2.0, 1.0])


@dataclass(frozen=True)
class PidGainSet:
    kp_cb: float
    ti_cb: float
    td_cb: float
    kp_v: float
    ti_v: float
    td_v: float

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in np.asarray(a, dtype=float).ravel()))

    def within_bounds(self, low=GAIN_LOW, high=GAIN_HIGH):
        g = self.as_array()
        return bool(np.all(g >= low) and np.all(g <= high))

    def to_dict(self):
        return {
            "cb_loop": {"kp": self.kp_cb, "tau_i": self.ti_cb, "tau_d": self.td_cb},
            "v_loop": {"kp": self.kp_v, "tau_i": self.ti_v, "tau_d": self.td_v},
        }

    @classmethod
    def from_dict(cls, d):
        cb, v = d["cb_loop"], d["v_loop"]
        return cls(cb["kp"], cb["tau_i"], cb["tau_d"], v["kp"], v["tau_i"], v["tau_d"])


# static gains reported for the differential-evolution baseline
REFERENCE_STATIC_GAINS = PidGainSet(3.09, 0.03, 0.83, 0.84, 1.85, 0.08)


def pid_velocity_delta(kp, tau_i, tau_d, e_t, e_tm1, e_tm2, dt=DT):
    """Velocity-form increment on normalised error.

    du = Kp*(e_t - e_{t-1}) + Kp/tau_i * e_t * dt + Kp*tau_d*(e_t - 2e_{t-1} + e_{t-2})/dt
    with ``tau_i`` floored at ``TAU_EPS``. Broadcasts over all arguments.
    """
    de = e_t - e_tm1
    d2e = e_t - 2.0 * e_tm1 + e_tm2
    return kp * de + kp / np.maximum(tau_i, TAU_EPS) * e_t * dt + kp * tau_d * d2e / dt


def pid_position(kp, tau_i, tau_d, errors, dt=DT):
    """Position-form outputs for a whole error sequence (constant gains).

    u_t = Kp*e_t + Kp/tau_i * dt * sum_{s<=t} e_s + Kp*tau_d*(e_t - e_{t-1})/dt,
    with e_{-1} taken equal to e_0. Returns ``u_0 .. u_n`` as an array.
    """
    e = np.asarray(errors, dtype=float)
    prev = np.concatenate([e[:1], e[:-1]])
    integral = np.cumsum(e)
    return kp * e + kp / max(tau_i, TAU_EPS) * dt * integral + kp * tau_d * (e - prev) / dt


def loop_errors(meas, sp):
    """Normalised errors for both loops from observation history.

    ``meas`` has shape ``(..., 3, 3)`` ([C_B, T, V] per lag), ``sp`` ``(..., 3, 2)``.
    Returns ``(..., 3, 2)`` with lag on axis -2 and loop on axis -1.
    """
    return (sp - meas[..., [0, 2]]) / CV_SPAN


def pid_deltas(gains, errors, dt=DT):
    """Both loops' normalised increments from gains ``(..., 6)`` and errors ``(..., 3, 2)``."""
    g = np.asarray(gains, dtype=float)
    kp = g[..., [0, 3]]
    ti = g[..., [1, 4]]
    td = g[..., [2, 5]]
    return pid_velocity_delta(kp, ti, td, errors[..., 0, :], errors[..., 1, :],
                              errors[..., 2, :], dt)


def pid_apply(prev_u, deltas):
    """Add de-normalised increments to the previous action and saturate.

    deltas[..., 0] comes from the C_B loop and moves T_c; deltas[..., 1] from the
    V loop and moves F_in.
    """
    u = np.asarray(prev_u, dtype=float) + np.asarray(deltas, dtype=float) * ACTION_SPAN
    return np.clip(u, ACTION_LOW, ACTION_HIGH)


def rga(k):
    """Relative gain array ``K * inv(K).T``."""
    k = np.asarray(k, dtype=float)
    if k.shape[0] != k.shape[1]:
        raise ValueError("gain matrix must be square")
    if not np.all(np.isfinite(k)) or np.linalg.matrix_rank(k) < k.shape[0]:
        raise SingularityError("gain matrix is singular")
    return k * np.linalg.inv(k).T


# columns of the gain matrix, ordered as in the published RGA
RGA_INPUTS = ("f_in", "t_c")
RGA_OUTPUTS = ("c_b", "vol")
NOMINAL_BASE = {"t_c": 340.0, "f_in": 100.0}
NOMINAL_STEPS = {"f_in": 0.5, "t_c": 5.0}


def _open_loop(x0, u, n, params, noise_std, rng, substeps):
    traj = np.empty((n + 1, 5))
    traj[0] = x0
    x = x0
    for k in range(n):
        x = integrate_step(x, u, DT, substeps, params)
        traj[k + 1] = x
    meas = traj[:, [C_B, TEMP, VOL]] + np.asarray(noise_std) * rng.standard_normal((n + 1, 3))
    return traj, meas


def steady_state_gain_matrix(base=None, steps=None, repeats=3, params: CstrParams = DEFAULT_PARAMS,
                             noise_std=(0.0, 0.0, 0.0), horizon=120, window=20, seed=0,
                             settle_tol=0.05, substeps=SUBSTEPS):
    """Open-loop process gains of ``[C_B, V]`` with respect to ``[F_in, T_c]``.

    Each run starts from the balanced-flow steady state at ``base``, holds the
    perturbed input for ``horizon`` control steps and averages the measured
    outputs over the last ``window`` steps. Volume is an integrating output, so
    its gain is the response accumulated over the horizon; an inlet-flow step
    therefore has no true steady state and its column is a fixed-horizon
    response. For the coolant step the volume stays balanced and C_B must have
    settled: its drift over the final window may not exceed ``settle_tol``
    times its total response.
    """
    base = dict(NOMINAL_BASE if base is None else base)
    steps = dict(NOMINAL_STEPS if steps is None else steps)
    u0 = np.array([base["t_c"], base["f_in"]])
    if np.any(u0 <= ACTION_LOW) or np.any(u0 >= ACTION_HIGH):
        raise DomainError("base action must lie strictly inside the action bounds")
    if base["f_in"] != params.f_out:
        raise DomainError("base inlet flow must balance the outlet flow")
    temp, c_a, c_b = steady_state(base["t_c"], base["f_in"], 100.0, params)
    x0 = np.array([c_a, c_b, 0.0, temp, 100.0])
    # C_C closes the A balance at steady state
    x0[2] = max(params.c_a_in * base["f_in"] / params.f_out - c_a - c_b, 0.0)
    rng = np.random.default_rng(seed)
    gains = np.zeros((repeats, 2, 2))
    for rep in range(repeats):
        _, y_base = _open_loop(x0, u0, horizon, params, noise_std, rng, substeps)
        ref = y_base[-window:].mean(axis=0)
        for j, name in enumerate(RGA_INPUTS):
            u = u0.copy()
            col = 0 if name == "t_c" else 1
            u[col] += steps[name]
            if not ACTION_LOW[col] <= u[col] <= ACTION_HIGH[col]:
                raise DomainError(f"perturbed {name} leaves the action bounds")
            traj, y = _open_loop(x0, u, horizon, params, noise_std, rng, substeps)
            total = traj[-1, C_B] - x0[C_B]
            drift = traj[-1, C_B] - traj[-window, C_B]
            if name == "t_c" and abs(drift) > settle_tol * abs(total) + 1e-9:
                raise NonConvergenceError(
                    f"C_B still moving after {horizon} steps for the {name} step "
                    f"(drift {drift:.3g} vs response {total:.3g})")
            resp = y[-window:].mean(axis=0) - ref
            gains[rep, :, j] = resp[[0, 2]] / steps[name]
    return gains.mean(axis=0)


def pairing(lam):
    """Output->input pairing implied by the largest relative gain in each row."""
    lam = np.asarray(lam)
    return {RGA_OUTPUTS[i]: RGA_INPUTS[int(np.argmax(lam[i]))] for i in range(lam.shape[0])}
