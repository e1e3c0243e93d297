"""CSTR plant: kinetics, ODE right-hand side, RK4 stepping, noise, reward and env.

Every numerical routine here broadcasts over leading batch dimensions so the
optimizer can simulate many episodes at once; the single-episode ``CstrEnv``
is a batch of one over the same code path.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError, DomainError, ProtocolError, SingularVolumeError

# control interval: 25 min horizon over 120 steps
DT = 25.0 / 120.0
N_STEPS = 120
SUBSTEPS = 10

# full-state layout
C_A, C_B, C_C, TEMP, VOL = range(5)
MEASURED = (C_B, TEMP, VOL)
CONTROLLED = (C_B, VOL)

X0 = np.array([0.0, 0.0, 0.0, 327.0, 102.0])

ACTION_LOW = np.array([290.0, 99.0])
ACTION_HIGH = np.array([450.0, 105.0])
ACTION_SPAN = ACTION_HIGH - ACTION_LOW
U_INIT = 0.5 * (ACTION_LOW + ACTION_HIGH)

# normalisation ranges for the measured channels [C_B, T, V]
MEAS_LOW = np.array([0.0, 300.0, 95.0])
MEAS_HIGH = np.array([1.0, 450.0, 110.0])
MEAS_SPAN = MEAS_HIGH - MEAS_LOW
# ranges for the controlled pair [C_B, V]
CV_SPAN = MEAS_SPAN[[0, 2]]

DEFAULT_NOISE_STD = tuple(float(v) for v in 0.01 * MEAS_SPAN)


class FullState(NamedTuple):
    c_a: float
    c_b: float
    c_c: float
    temp: float
    vol: float


class Action(NamedTuple):
    t_c: float
    f_in: float


@dataclass(frozen=True)
class CstrParams:
    t_f: float = 350.0
    c_a_in: float = 1.0
    f_out: float = 100.0
    rho: float = 1000.0
    c_p: float = 0.239
    ua: float = 5.0e4
    dh_a: float = 5.0e3
    dh_b: float = 4.0e3
    e_a_over_r: float = 8750.0
    e_b_over_r: float = 10750.0
    k_a: float = 7.2e10
    k_b: float = 8.2e10

    def __post_init__(self):
        for name, value in vars(self).items():
            if not np.isfinite(value):
                raise DomainError(f"{name} must be finite")
            # rate constants may be zeroed to switch chemistry off
            if name in ("k_a", "k_b"):
                if value < 0:
                    raise DomainError(f"{name} must be >= 0, got {value}")
            elif value <= 0:
                raise DomainError(f"{name} must be > 0, got {value}")


DEFAULT_PARAMS = CstrParams()


def reaction_rates(state, p: CstrParams = DEFAULT_PARAMS):
    """Arrhenius rates ``(r_a, r_b)`` in mol/m^3/min for A->B and B->C."""
    x = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite state passed to reaction_rates")
    temp = x[..., TEMP]
    if np.any(temp <= 0):
        raise DomainError("temperature must be positive")
    r_a = p.k_a * np.exp(-p.e_a_over_r / temp) * x[..., C_A]
    r_b = p.k_b * np.exp(-p.e_b_over_r / temp) * x[..., C_B]
    return r_a, r_b


def _rhs(x, u, p, c_a_in):
    # unchecked kernel used inside the RK4 loop
    c_a, c_b, c_c, temp, vol = (x[..., i] for i in range(5))
    t_c = u[..., 0]
    f_in = u[..., 1]
    r_a = p.k_a * np.exp(-p.e_a_over_r / temp) * c_a
    r_b = p.k_b * np.exp(-p.e_b_over_r / temp) * c_b
    rho_cp = p.rho * p.c_p
    d = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (5,)))
    d[..., C_A] = (f_in * c_a_in - p.f_out * c_a) / vol - r_a
    d[..., C_B] = r_a - r_b - p.f_out * c_b / vol
    d[..., C_C] = r_b - p.f_out * c_c / vol
    d[..., TEMP] = (
        f_in * (p.t_f - temp) / vol
        + p.dh_a / rho_cp * r_a
        + p.dh_b / rho_cp * r_b
        + p.ua * (t_c - temp) / (vol * rho_cp)
    )
    d[..., VOL] = f_in - p.f_out
    return d


def cstr_rhs(state, u, p: CstrParams = DEFAULT_PARAMS, c_a_in_eff=None):
    """Time derivative of ``[C_A, C_B, C_C, T, V]`` under action ``u = [T_c, F_in]``.

    ``c_a_in_eff`` overrides the nominal feed concentration; this is how the
    unmeasured feed disturbance enters the plant.
    """
    x = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(x[..., VOL] <= 0):
        raise SingularVolumeError("reactor volume must be positive")
    c_a_in = p.c_a_in if c_a_in_eff is None else np.asarray(c_a_in_eff, dtype=float)
    return _rhs(x, u, p, c_a_in)


def integrate_step(state, u, dt=DT, substeps=SUBSTEPS, p: CstrParams = DEFAULT_PARAMS,
                   c_a_in_eff=None):
    """Advance the plant by ``dt`` minutes with classical RK4, ``u`` held constant.

    Concentrations are clamped at zero after the interval.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x, bad, first = _rk4(state, u, dt, substeps, p, c_a_in_eff)
    if bad.any():
        raise DivergenceError(f"non-finite state at substep {first}", step=first)
    return x


def _rk4(state, u, dt, substeps, p, c_a_in_eff):
    """Unchecked RK4 interval; returns the state, a per-row divergence mask and
    the first substep at which any row diverged (or None)."""
    x = np.array(state, dtype=float)
    u = np.asarray(u, dtype=float)
    c_a_in = p.c_a_in if c_a_in_eff is None else np.asarray(c_a_in_eff, dtype=float)
    h = dt / substeps
    bad = np.zeros(x.shape[:-1], dtype=bool)
    first = None
    for i in range(substeps):
        if np.any(x[..., VOL][~bad] <= 0):
            raise SingularVolumeError("reactor volume must be positive")
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = _rhs(x, u, p, c_a_in)
            k2 = _rhs(x + 0.5 * h * k1, u, p, c_a_in)
            k3 = _rhs(x + 0.5 * h * k2, u, p, c_a_in)
            k4 = _rhs(x + h * k3, u, p, c_a_in)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        # a non-positive temperature can only come from a blown-up step
        now = ~np.all(np.isfinite(x), axis=-1) | (x[..., TEMP] <= 0)
        if first is None and np.any(now & ~bad):
            first = i
        bad = bad | now
    x[..., :3] = np.maximum(x[..., :3], 0.0)
    return x, bad, first


def observe(state, noise_std, rng):
    """Noisy measurement of ``[C_B, T, V]``; draws three normals in channel order."""
    x = np.asarray(state, dtype=float)
    std = np.asarray(noise_std, dtype=float)
    if np.any(std < 0):
        raise ValueError("noise std must be non-negative")
    return x[..., MEASURED] + std * rng.standard_normal(3)


def reward(e, du, q, r):
    """``-(e'Qe + du'R du)`` with diagonal weights; inputs are already normalised."""
    e = np.asarray(e, dtype=float)
    du = np.asarray(du, dtype=float)
    return -(np.sum(np.asarray(q) * e * e, axis=-1) + np.sum(np.asarray(r) * du * du, axis=-1))


def normalize_action(u):
    return (np.asarray(u, dtype=float) - ACTION_LOW) / ACTION_SPAN


def denormalize_action(z):
    return ACTION_LOW + np.asarray(z, dtype=float) * ACTION_SPAN


@dataclass
class Observation:
    """Three-step history; row 0 is time t, rows 1 and 2 are t-1 and t-2.

    ``measured`` columns are [C_B, T, V]; ``setpoints`` columns are [C_B*, V*].
    """

    measured: np.ndarray
    setpoints: np.ndarray


class BatchCstr:
    """Vectorised episodes, one per (scenario, seed) pair.

    Measurement noise for each episode is drawn up front from
    ``np.random.default_rng(seed)`` as a ``(n_s + 1, 3)`` block, which is the
    same stream ``observe`` would consume step by step.

    With ``quarantine=True`` a diverging episode does not abort the batch: its
    state is frozen at the last finite value, that step's reward is ``-inf``
    and later rewards are 0, so its return is ``-inf``. ``diverged`` flags
    such rows.
    """

    def __init__(self, scenarios, seeds, params: CstrParams = DEFAULT_PARAMS,
                 substeps=SUBSTEPS, dt=DT, quarantine=False):
        if len(scenarios) != len(seeds):
            raise ValueError("need one seed per scenario")
        n_s = {sc.n_s for sc in scenarios}
        if len(n_s) != 1:
            raise ValueError("all scenarios in a batch must share n_s")
        self.n_s = n_s.pop()
        self.params = params
        self.substeps = substeps
        self.dt = dt
        self.seeds = [int(s) for s in seeds]
        self.setpoints = np.stack([sc.setpoint_array() for sc in scenarios])
        self.feed = np.stack([sc.feed_array(params.c_a_in) for sc in scenarios])
        self.noise_std = np.array([sc.noise for sc in scenarios], dtype=float)
        self.q = np.array([sc.q for sc in scenarios], dtype=float)
        self.r = np.array([sc.r for sc in scenarios], dtype=float)
        self.size = len(scenarios)
        self.quarantine = quarantine
        self.k = None

    @property
    def done(self):
        return self.k is not None and self.k >= self.n_s

    def reset(self):
        b = self.size
        draws = np.stack([
            np.random.default_rng(s).standard_normal((self.n_s + 1, 3)) for s in self.seeds
        ])
        self.noise = draws * self.noise_std[:, None, :]
        self.x = np.tile(X0, (b, 1))
        y0 = self.x[:, MEASURED] + self.noise[:, 0]
        self.meas = np.repeat(y0[:, None, :], 3, axis=1)
        self.sp = np.repeat(self.setpoints[:, :1, :], 3, axis=1)
        self.prev_u = np.tile(U_INIT, (b, 1))
        self.last_u = self.prev_u.copy()
        self.diverged = np.zeros(b, dtype=bool)
        self.k = 0
        return self.meas.copy(), self.sp.copy()

    def step(self, u):
        if self.k is None:
            raise ProtocolError("step called before reset")
        if self.k >= self.n_s:
            raise ProtocolError("episode is done; call reset")
        u = np.clip(np.broadcast_to(np.asarray(u, dtype=float), (self.size, 2)),
                    ACTION_LOW, ACTION_HIGH)
        x, bad, first = _rk4(self.x, u, self.dt, self.substeps, self.params,
                             self.feed[:, self.k])
        fresh = bad & ~self.diverged
        if bad.any() and not self.quarantine:
            raise DivergenceError(f"plant diverged during control step {self.k}: "
                                  f"non-finite state at substep {first}", step=self.k)
        self.x = np.where(bad[:, None], self.x, x)
        self.diverged |= bad
        self.k += 1
        y = self.x[:, MEASURED] + self.noise[:, self.k]
        self.meas = np.concatenate([y[:, None, :], self.meas[:, :2]], axis=1)
        sp_now = self.setpoints[:, min(self.k, self.n_s - 1)]
        self.sp = np.concatenate([sp_now[:, None, :], self.sp[:, :2]], axis=1)
        e = (sp_now - self.x[:, CONTROLLED]) / CV_SPAN
        du = (u - self.prev_u) / ACTION_SPAN
        r = reward(e, du, self.q, self.r)
        if self.quarantine:
            r = np.where(fresh, -np.inf, np.where(self.diverged, 0.0, r))
        self.prev_u = u
        self.last_u = u
        return r


class CstrEnv:
    """Gym-style single episode: ``reset(seed)`` then ``step(action)`` until done."""

    def __init__(self, scenario, params: CstrParams = DEFAULT_PARAMS, substeps=SUBSTEPS):
        self.scenario = scenario
        self.params = params
        self.substeps = substeps
        self._batch = None

    def reset(self, seed=0):
        self._batch = BatchCstr([self.scenario], [seed], self.params, self.substeps)
        meas, sp = self._batch.reset()
        return Observation(meas[0], sp[0])

    def step(self, action):
        if self._batch is None:
            raise ProtocolError("step called before reset")
        b = self._batch
        r = float(b.step(np.asarray(action, dtype=float)[None, :])[0])
        obs = Observation(b.meas[0].copy(), b.sp[0].copy())
        info = {
            "state": FullState(*b.x[0]),
            "setpoint": tuple(b.sp[0, 0]),
            "action": Action(*b.last_u[0]),
        }
        return obs, r, b.done, info

    @property
    def full_state(self):
        return FullState(*self._batch.x[0])

    @property
    def prev_action(self):
        return Action(*self._batch.prev_u[0])

    @property
    def step_index(self):
        return self._batch.k

    @property
    def done(self):
        return self._batch is not None and self._batch.done


TRAJECTORY_COLUMNS = ("step", "time_min", "c_a", "c_b", "c_c", "temp", "vol",
                      "cb_meas", "t_meas", "v_meas", "cb_sp", "v_sp", "t_c", "f_in", "reward")


def write_trajectory_csv(path, traj, dt=DT):
    """Write one recorded episode.

    ``traj`` holds arrays ``state (n+1, 5)``, ``meas (n+1, 3)``, ``sp (n+1, 2)``,
    ``action (n+1, 2)`` and ``reward (n+1,)``; row 0 is the reset state with the
    initial previous action and zero reward.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for k in range(len(traj["reward"])):
            w.writerow([k, repr(k * dt)] + [repr(float(v)) for v in (
                *traj["state"][k], *traj["meas"][k], *traj["sp"][k],
                *traj["action"][k], traj["reward"][k])])
