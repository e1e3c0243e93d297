"""Rollouts, fitness evaluation and the derivative-free optimizers.

Policies are trained with random search followed by particle swarm
optimisation; the static PID baseline is tuned with DE/rand/1/bin. All
fitness evaluations within an iteration run as one vectorised batch, and
best-so-far bookkeeping happens afterwards in particle-index order, so results
depend only on the seeds.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .control import GAIN_HIGH, GAIN_LOW, PidGainSet
from .policy import (
    CIRL, LAYOUTS, STATIC_PID, PolicyParams, StaticPidController, make_controller,
)
from .sim import DEFAULT_PARAMS, SUBSTEPS, BatchCstr, CstrParams


def simulate(controller, scenarios, seeds, params: CstrParams = DEFAULT_PARAMS,
             substeps=SUBSTEPS, n_steps=None, record=False, quarantine=False):
    """Run every policy of ``controller`` on every ``(scenario, seed)`` episode.

    Returns cumulative rewards of shape ``(P, E)``. With ``record=True`` also
    returns a dict of per-step arrays shaped ``(P, E, n + 1, ...)`` (gains are
    ``(P, E, n, 6)`` and absent for pure-RL). ``quarantine`` scores diverging
    episodes as ``-inf`` instead of raising.
    """
    n_pol = controller.n_policies
    n_ep = len(scenarios)
    env = BatchCstr(list(scenarios) * n_pol, list(seeds) * n_pol, params, substeps,
                   quarantine=quarantine)
    n = env.n_s if n_steps is None else int(n_steps)
    if not 1 <= n <= env.n_s:
        raise ValueError(f"n_steps must lie in [1, {env.n_s}]")
    meas, sp = env.reset()
    shape = (n_pol, n_ep)
    total = np.zeros(n_pol * n_ep)
    if record:
        rec = {
            "state": [env.x.copy()], "meas": [env.meas[:, 0].copy()],
            "sp": [env.sp[:, 0].copy()], "action": [env.prev_u.copy()],
            "reward": [np.zeros(n_pol * n_ep)], "gains": [],
        }
    for _ in range(n):
        u, g = controller.act(env.meas.reshape(shape + (3, 3)), env.sp.reshape(shape + (3, 2)),
                              env.prev_u.reshape(shape + (2,)))
        r = env.step(u.reshape(-1, 2))
        total += r
        if record:
            rec["state"].append(env.x.copy())
            rec["meas"].append(env.meas[:, 0].copy())
            rec["sp"].append(env.sp[:, 0].copy())
            rec["action"].append(env.last_u.copy())
            rec["reward"].append(r)
            if g is not None:
                rec["gains"].append(np.asarray(g).reshape(-1, 6).copy())
    total = total.reshape(shape)
    if not record:
        return total
    out = {}
    for key, seq in rec.items():
        if not seq:
            continue
        arr = np.stack(seq, axis=1)
        out[key] = arr.reshape(shape + arr.shape[1:])
    return total, out


def as_controller(policy):
    if isinstance(policy, PolicyParams):
        return make_controller(policy.kind, policy.vector)
    if isinstance(policy, PidGainSet):
        return StaticPidController(policy.as_array())
    return policy


def rollout(policy, scenario, seed, n_s=None, params: CstrParams = DEFAULT_PARAMS,
            substeps=SUBSTEPS):
    """Undiscounted cumulative reward of one episode."""
    return float(simulate(as_controller(policy), [scenario], [seed], params, substeps,
                          n_steps=n_s)[0, 0])


class EpisodeEvaluator:
    """Batch fitness: mean over ``n_e`` episodes of the summed sub-episode returns.

    Episode ``j`` of every sub-episode uses noise seed ``seed_base + j``.
    ``episodes`` counts single-scenario rollouts performed so far.
    """

    def __init__(self, kind, scenarios, n_e=3, seed_base=0, params: CstrParams = DEFAULT_PARAMS,
                 substeps=SUBSTEPS):
        if n_e < 1:
            raise ValueError("n_e must be >= 1")
        self.kind = kind
        self.scenarios = list(scenarios)
        self.n_e = n_e
        self.seed_base = seed_base
        self.params = params
        self.substeps = substeps
        self.episodes = 0

    def __call__(self, positions):
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        eps = [(sc, self.seed_base + j) for j in range(self.n_e) for sc in self.scenarios]
        ctrl = make_controller(self.kind, positions)
        # an unstable candidate is scored -inf rather than aborting the batch
        rewards = simulate(ctrl, [e[0] for e in eps], [e[1] for e in eps], self.params,
                           self.substeps, quarantine=True)
        self.episodes += rewards.size
        per_episode = rewards.reshape(len(positions), self.n_e, len(self.scenarios)).sum(axis=2)
        return per_episode.mean(axis=1)


def evaluate(policy, scenarios, n_e=1, seed_base=0, **kw):
    """Fitness of a single policy (``PolicyParams`` or ``PidGainSet``)."""
    if isinstance(policy, PidGainSet):
        kind, vec = STATIC_PID, policy.as_array()
    else:
        kind, vec = policy.kind, policy.vector
    return float(EpisodeEvaluator(kind, scenarios, n_e, seed_base, **kw)(vec[None])[0])


@dataclass
class SwarmConfig:
    w: float = 0.6
    c1: float = 1.0
    c2: float = 1.0
    n_init: int = 30
    n_particles: int = 15
    n_iters: int = 150
    n_episodes: int = 3
    n_steps: int = 120
    seed: int = 0
    init_low: float = -1.0
    init_high: float = 1.0
    per_dimension: bool = False

    def __post_init__(self):
        if self.n_init < 1 or self.n_particles < 1 or self.n_iters < 0 or self.n_episodes < 1:
            raise ValueError("swarm sizes and counts must be positive")
        if self.n_particles > self.n_init:
            raise ValueError("n_particles cannot exceed n_init")
        if self.init_low > self.init_high:
            raise ValueError("init_low must not exceed init_high")


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float


@dataclass
class FitnessRecord:
    iteration: int
    best_fitness: float
    fitnesses: np.ndarray
    wall_time: float = 0.0


def pso_update(particle: Particle, global_best, cfg: SwarmConfig, rng) -> Particle:
    """One velocity/position update; ``r1, r2`` are scalars unless ``cfg.per_dimension``."""
    theta = particle.position
    if cfg.per_dimension:
        r1, r2 = rng.random(theta.size), rng.random(theta.size)
    else:
        r1, r2 = rng.random(), rng.random()
    v = (cfg.w * particle.velocity + cfg.c1 * r1 * (particle.best_position - theta)
         + cfg.c2 * r2 * (np.asarray(global_best) - theta))
    return Particle(theta + v, v, particle.best_position, particle.best_fitness)


def random_search_init(n, dim, init_range, rng, evaluator):
    """Uniform population, evaluated once; returns ``(best, population, fitness)``.

    Ties resolve to the lowest index.
    """
    lo, hi = init_range
    population = rng.uniform(lo, hi, size=(n, dim))
    fitness = np.asarray(evaluator(population), dtype=float)
    return population[int(np.argmax(fitness))].copy(), population, fitness


def _swarm_state(particles, g, g_fit):
    return {
        "positions": np.stack([p.position for p in particles]).tolist(),
        "velocities": np.stack([p.velocity for p in particles]).tolist(),
        "best_positions": np.stack([p.best_position for p in particles]).tolist(),
        "best_fitness": [float(p.best_fitness) for p in particles],
        "global_best": np.asarray(g).tolist(),
        "global_best_fitness": float(g_fit),
    }


def pso_optimize(cfg: SwarmConfig, evaluator, dim, resume=None, on_iteration=None):
    """Random-search seeding followed by ``cfg.n_iters`` synchronous PSO iterations.

    Returns ``(best_position, best_fitness, history, checkpoint)`` where
    ``history[0]`` describes the random-search phase and ``checkpoint`` is a
    JSON-ready dict from which ``resume`` can continue the run exactly.
    """
    rng = np.random.default_rng(cfg.seed)
    history = []
    t0 = time.perf_counter()
    if resume is None:
        best, population, fitness = random_search_init(
            cfg.n_init, dim, (cfg.init_low, cfg.init_high), rng, evaluator)
        order = np.argsort(-fitness, kind="stable")[:cfg.n_particles]
        particles = [Particle(population[i].copy(), np.zeros(dim), population[i].copy(),
                              float(fitness[i])) for i in order]
        g, g_fit = best, float(fitness.max())
        history.append(FitnessRecord(0, g_fit, fitness, time.perf_counter() - t0))
        start = 1
    else:
        st = resume["swarm"]
        particles = [Particle(np.array(x), np.array(v), np.array(b), float(f)) for x, v, b, f in
                     zip(st["positions"], st["velocities"], st["best_positions"],
                         st["best_fitness"])]
        g, g_fit = np.array(st["global_best"]), float(st["global_best_fitness"])
        rng.bit_generator.state = resume["rng_state"]
        history = [FitnessRecord(h["iteration"], h["best_fitness"], np.array(h["fitnesses"]),
                                 h["wall_time"]) for h in resume.get("history", [])]
        start = int(resume["iteration"]) + 1
    if on_iteration is not None and resume is None:
        on_iteration(history[-1])
    for it in range(start, cfg.n_iters + 1):
        particles = [pso_update(p, g, cfg, rng) for p in particles]
        fitness = np.asarray(evaluator(np.stack([p.position for p in particles])), dtype=float)
        for p, f in zip(particles, fitness):
            if f > p.best_fitness:
                p.best_position, p.best_fitness = p.position.copy(), float(f)
            if f > g_fit:
                g, g_fit = p.position.copy(), float(f)
        history.append(FitnessRecord(it, g_fit, fitness, time.perf_counter() - t0))
        if on_iteration is not None:
            on_iteration(history[-1])
    last = history[-1].iteration if history else 0
    checkpoint = {
        "iteration": last,
        "swarm": _swarm_state(particles, g, g_fit),
        "rng_state": rng.bit_generator.state,
        "config": asdict(cfg),
        "history": [{"iteration": h.iteration, "best_fitness": h.best_fitness,
                     "fitnesses": np.asarray(h.fitnesses).tolist(), "wall_time": h.wall_time}
                    for h in history],
    }
    return g, g_fit, history, checkpoint


def train_policy(kind, scenarios, cfg: SwarmConfig, seed_base=None, metadata=None, **kw):
    """PSO-train a CIRL or pure-RL policy; returns ``(PolicyParams, history, checkpoint)``."""
    layout = LAYOUTS[kind]
    seed_base = 1000 * cfg.seed if seed_base is None else seed_base
    evaluator = EpisodeEvaluator(kind, scenarios, cfg.n_episodes, seed_base, **kw)
    g, g_fit, history, ckpt = pso_optimize(cfg, evaluator, layout.n_params)
    meta = {"seed": cfg.seed, "fitness": g_fit, **(metadata or {})}
    return PolicyParams(g, layout, kind, meta), history, ckpt


LEARNING_CURVE_COLUMNS = ("iteration", "best_fitness", "mean_fitness", "min_fitness", "wall_time_s")


def write_learning_curve(path, history, wall_time=False):
    """Learning-curve CSV; ``wall_time_s`` is left empty unless requested so reruns are
    byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEARNING_CURVE_COLUMNS)
        for h in history:
            f = np.asarray(h.fitnesses)
            w.writerow([h.iteration, repr(float(h.best_fitness)), repr(float(f.mean())),
                        repr(float(f.min())), repr(float(h.wall_time)) if wall_time else ""])


def save_checkpoint(ckpt, path):
    with open(path, "w") as fh:
        json.dump(ckpt, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return json.load(fh)


@dataclass
class DeConfig:
    pop_size: int = 20
    f: float = 0.8
    cr: float = 0.9
    generations: int = 100
    seed: int = 0


@dataclass
class DeResult:
    best: np.ndarray
    best_fitness: float
    history: list = field(default_factory=list)
    evaluated: list = field(default_factory=list)


def differential_evolution(evaluator, low, high, cfg: DeConfig, keep_candidates=False):
    """Maximise ``evaluator`` over the box ``[low, high]`` with DE/rand/1/bin.

    Mutants are clipped to the box, so every evaluated candidate is feasible.
    Trials replace their parent when at least as fit.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    if np.any(low > high):
        raise ValueError("lower bounds exceed upper bounds")
    if cfg.pop_size < 4:
        raise ValueError("DE/rand/1 needs a population of at least 4")
    rng = np.random.default_rng(cfg.seed)
    dim = low.size
    pop = low + rng.random((cfg.pop_size, dim)) * (high - low)
    fit = np.asarray(evaluator(pop), dtype=float)
    res = DeResult(pop[int(np.argmax(fit))].copy(), float(fit.max()))
    res.history.append(FitnessRecord(0, res.best_fitness, fit.copy()))
    if keep_candidates:
        res.evaluated.append(pop.copy())
    idx = np.arange(cfg.pop_size)
    for gen in range(1, cfg.generations + 1):
        trials = np.empty_like(pop)
        for i in range(cfg.pop_size):
            a, b, c = rng.choice(idx[idx != i], size=3, replace=False)
            mutant = np.clip(pop[a] + cfg.f * (pop[b] - pop[c]), low, high)
            cross = rng.random(dim) < cfg.cr
            cross[rng.integers(dim)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        trial_fit = np.asarray(evaluator(trials), dtype=float)
        if keep_candidates:
            res.evaluated.append(trials.copy())
        better = trial_fit >= fit
        pop[better] = trials[better]
        fit[better] = trial_fit[better]
        i_best = int(np.argmax(fit))
        if fit[i_best] > res.best_fitness:
            res.best, res.best_fitness = pop[i_best].copy(), float(fit[i_best])
        res.history.append(FitnessRecord(gen, res.best_fitness, fit.copy()))
    return res


def de_tune_static_pid(scenarios, cfg: DeConfig = None, n_e=3, seed_base=0,
                       low=GAIN_LOW, high=GAIN_HIGH, **kw):
    """Tune six static PID gains on ``scenarios``; returns ``(PidGainSet, DeResult)``."""
    cfg = DeConfig() if cfg is None else cfg
    evaluator = EpisodeEvaluator(STATIC_PID, scenarios, n_e, seed_base, **kw)
    res = differential_evolution(evaluator, low, high, cfg)
    return PidGainSet.from_array(res.best), res

