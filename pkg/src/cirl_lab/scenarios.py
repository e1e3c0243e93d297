"""Setpoint schedules, feed disturbances and the experiment scenario builders."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .errors import ScheduleBoundsError, SchemaError
from .sim import DEFAULT_NOISE_STD, DEFAULT_PARAMS, N_STEPS, CstrParams

V_SETPOINT = 100.0
DISTURBANCE_ONSET = 60


@dataclass(frozen=True)
class Scenario:
    """One rollout definition.

    ``schedule`` is a tuple of ``(steps, cb_sp, v_sp)`` segments covering
    ``[0, n_s)`` with half-open boundaries. ``disturbance`` lists
    ``(start_step, c_a_in)`` changes; before the first entry the nominal feed
    concentration applies.
    """

    name: str
    schedule: tuple
    disturbance: tuple = ()
    noise: tuple = DEFAULT_NOISE_STD
    q: tuple = (1.0, 1.0)
    r: tuple = (0.0, 0.0)
    n_s: int = N_STEPS

    def __post_init__(self):
        total = sum(int(seg[0]) for seg in self.schedule)
        if total != self.n_s:
            raise SchemaError(f"schedule durations sum to {total}, expected n_s={self.n_s}")
        if any(int(seg[0]) <= 0 for seg in self.schedule):
            raise SchemaError("segment durations must be positive")
        if any(v <= 0 for _, v in self.disturbance):
            raise SchemaError("feed concentrations must be positive")
        if any(s < 0 for s in self.noise) or len(self.noise) != 3:
            raise SchemaError("noise must be three non-negative std devs")
        if any(w < 0 for w in (*self.q, *self.r)):
            raise SchemaError("reward weights must be non-negative")

    def setpoint_at(self, step):
        return setpoint_at(self.schedule, step, self.n_s)

    def setpoint_array(self):
        """``(n_s, 2)`` array of ``[C_B*, V*]`` per step."""
        return np.concatenate([
            np.tile([cb, v], (int(n), 1)) for n, cb, v in self.schedule
        ]).astype(float)

    def feed_array(self, nominal=1.0):
        """Feed concentration of A active during each control interval."""
        feed = np.full(self.n_s, float(nominal))
        for start, value in sorted(self.disturbance):
            feed[int(start):] = value
        return feed

    def to_dict(self):
        return {
            "name": self.name,
            "schedule": [[int(n), float(cb), float(v)] for n, cb, v in self.schedule],
            "disturbance": [[int(s), float(c)] for s, c in self.disturbance],
            "noise": [float(s) for s in self.noise],
            "weights": {"q": [float(w) for w in self.q], "r": [float(w) for w in self.r]},
            "n_s": self.n_s,
        }

    @classmethod
    def from_dict(cls, d):
        for key in ("schedule", "n_s"):
            if key not in d:
                raise SchemaError(f"scenario is missing field '{key}'")
        weights = d.get("weights", {})
        return cls(
            name=d.get("name", "custom"),
            schedule=tuple((int(n), float(cb), float(v)) for n, cb, v in d["schedule"]),
            disturbance=tuple((int(s), float(c)) for s, c in d.get("disturbance", [])),
            noise=tuple(float(s) for s in d.get("noise", DEFAULT_NOISE_STD)),
            q=tuple(float(w) for w in weights.get("q", (1.0, 1.0))),
            r=tuple(float(w) for w in weights.get("r", (0.0, 0.0))),
            n_s=int(d["n_s"]),
        )


def setpoint_at(schedule, step, n_s=None):
    n_s = sum(int(seg[0]) for seg in schedule) if n_s is None else n_s
    if not 0 <= step < n_s:
        raise ScheduleBoundsError(f"step {step} outside [0, {n_s})")
    start = 0
    for n, cb, v in schedule:
        if step < start + n:
            return float(cb), float(v)
        start += n
    raise ScheduleBoundsError(f"step {step} not covered by schedule")


def thirds(values, n_s=N_STEPS, v_sp=V_SETPOINT):
    """Equal-length segments for a list of C_B setpoints."""
    k = len(values)
    lengths = [n_s // k] * k
    lengths[-1] += n_s - sum(lengths)
    return tuple((n, float(cb), v_sp) for n, cb in zip(lengths, values))


TRAINING_SETPOINTS = ((0.1, 0.25, 0.4), (0.55, 0.65, 0.75), (0.7, 0.75, 0.8))
TEST_SETPOINTS = (0.075, 0.45, 0.75)
HIGH_OP_TEST_SETPOINTS = (0.45, 0.88)
DISTURBANCE_TRAINING_FEEDS = (1.5, 1.6, 1.9)
DISTURBANCE_TEST_FEED = 1.75
DISTURBANCE_SETPOINT = 0.5


def build_training_set(**overrides):
    return [Scenario(f"training-{i + 1}", thirds(sps), **overrides)
            for i, sps in enumerate(TRAINING_SETPOINTS)]


def build_test_scenario(**overrides):
    return Scenario("test", thirds(TEST_SETPOINTS), **overrides)


def steady_state(t_c, f_in=100.0, vol=100.0, p: CstrParams = DEFAULT_PARAMS, c_a_in=None):
    """Steady state ``(T, C_A, C_B)`` at balanced flows by root-finding the energy balance.

    Returns the highest-temperature root if the energy balance has several.
    """
    c_a_in = p.c_a_in if c_a_in is None else c_a_in
    dil = p.f_out / vol
    rho_cp = p.rho * p.c_p

    def comps(temp):
        ka = p.k_a * np.exp(-p.e_a_over_r / temp)
        kb = p.k_b * np.exp(-p.e_b_over_r / temp)
        c_a = f_in * c_a_in / vol / (dil + ka)
        c_b = ka * c_a / (dil + kb)
        return ka, kb, c_a, c_b

    def balance(temp):
        ka, kb, c_a, c_b = comps(temp)
        return (f_in * (p.t_f - temp) / vol + p.dh_a / rho_cp * ka * c_a
                + p.dh_b / rho_cp * kb * c_b + p.ua * (t_c - temp) / (vol * rho_cp))

    grid = np.linspace(200.0, 800.0, 1201)
    vals = balance(grid)
    idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    temp = brentq(balance, grid[idx[-1]], grid[idx[-1] + 1], xtol=1e-12)
    _, _, c_a, c_b = comps(temp)
    return temp, c_a, c_b


def operating_curve(t_c_grid=None, p: CstrParams = DEFAULT_PARAMS):
    """Steady-state ``C_B`` against coolant temperature at V = 100 m^3."""
    if t_c_grid is None:
        t_c_grid = np.linspace(290.0, 450.0, 321)
    return np.asarray(t_c_grid), np.array([steady_state(t, p=p)[2] for t in t_c_grid])


@lru_cache(maxsize=8)
def operating_peak(p: CstrParams = DEFAULT_PARAMS):
    """``(T_c, C_B)`` at the maximum of the operating curve."""
    t_c, c_b = operating_curve(p=p)
    i = int(np.argmax(c_b))
    return float(t_c[i]), float(c_b[i])


def build_extended_training_set(**overrides):
    """Training set plus one sub-episode climbing through the C_B peak to 0.88."""
    _, peak = operating_peak()
    extra = (0.8, round(peak, 2), HIGH_OP_TEST_SETPOINTS[-1])
    return build_training_set(**overrides) + [
        Scenario("extended-4", thirds(extra), **overrides)]


def build_high_op_test_scenario(**overrides):
    return Scenario("high-op-test", thirds(HIGH_OP_TEST_SETPOINTS), **overrides)


def _disturbance(name, feed, onset, **overrides):
    return Scenario(name, thirds((DISTURBANCE_SETPOINT,)),
                    disturbance=((onset, float(feed)),), **overrides)


def build_disturbance_set(onset=DISTURBANCE_ONSET, **overrides):
    """Three training scenarios and one test scenario with a mid-episode feed step."""
    train = [_disturbance(f"disturbance-{i + 1}", f, onset, **overrides)
             for i, f in enumerate(DISTURBANCE_TRAINING_FEEDS)]
    test = _disturbance("disturbance-test", DISTURBANCE_TEST_FEED, onset, **overrides)
    return train, test


def scenario_sets(**overrides):
    """All named scenario sets, keyed by CLI id."""
    dist_train, dist_test = build_disturbance_set(**overrides)
    return {
        "training": build_training_set(**overrides),
        "test": [build_test_scenario(**overrides)],
        "extended": build_extended_training_set(**overrides),
        "high-op-test": [build_high_op_test_scenario(**overrides)],
        "disturbance-training": dist_train,
        "disturbance-test": [dist_test],
    }


def with_overrides(scenarios, **changes):
    return [replace(sc, **changes) for sc in scenarios]


def load_scenarios(ref, **overrides):
    """Resolve a scenario set id or a JSON file holding one scenario or a list."""
    sets = scenario_sets(**overrides)
    if ref in sets:
        return sets[ref]
    try:
        with open(ref) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"unknown scenario '{ref}' (not a set id or file); "
                          f"known ids: {', '.join(sets)}") from None
    items = data if isinstance(data, list) else [data]
    scs = [Scenario.from_dict(d) for d in items]
    return with_overrides(scs, **overrides) if overrides else scs


def dump_scenarios(scenarios, path):
    with open(path, "w") as fh:
        json.dump([sc.to_dict() for sc in scenarios], fh, indent=2)
        fh.write("\n")
