import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirl_lab.errors import DivergenceError
from cirl_lab.control import GAIN_HIGH, GAIN_LOW, PidGainSet
from cirl_lab.optimize import (
    DeConfig, EpisodeEvaluator, Particle, SwarmConfig, de_tune_static_pid,
    differential_evolution, evaluate, load_checkpoint, pso_optimize, pso_update,
    random_search_init, rollout, save_checkpoint, train_policy, write_learning_curve,
)
from cirl_lab.policy import (
    CIRL, CIRL_LAYOUT, PURE_RL, PURE_RL_LAYOUT, PolicyParams, pack, unpack,
)
from cirl_lab.scenarios import Scenario, build_test_scenario, build_training_set, thirds
from cirl_lab.sim import (
    ACTION_HIGH, ACTION_LOW, ACTION_SPAN, DT, U_INIT, X0, CstrParams, integrate_step,
)


def neg_sphere(positions):
    return -np.sum(np.atleast_2d(positions) ** 2, axis=1)


class CountingSphere:
    def __init__(self):
        self.calls = 0

    def __call__(self, positions):
        self.calls += len(np.atleast_2d(positions))
        return neg_sphere(positions)


class OnesRng:
    def random(self, size=None):
        return 1.0 if size is None else np.ones(size)


def particle(theta, v, p):
    return Particle(np.array(theta, float), np.array(v, float), np.array(p, float), 0.0)


class TestPsoUpdate:
    def test_consensus_fixed_point(self):
        pt = pso_update(particle([0.3, -1], [0, 0], [0.3, -1]), [0.3, -1], SwarmConfig(),
                        np.random.default_rng(0))
        np.testing.assert_array_equal(pt.position, [0.3, -1])
        np.testing.assert_array_equal(pt.velocity, 0.0)

    def test_hand_arithmetic(self):
        pt = pso_update(particle([0.0], [1.0], [1.0]), [2.0], SwarmConfig(), OnesRng())
        assert pt.velocity[0] == pytest.approx(3.6) and pt.position[0] == pytest.approx(3.6)

    def test_pure_inertia(self):
        cfg = SwarmConfig(c1=0.0, c2=0.0)
        pt = pso_update(particle([1.0, 2.0], [0.5, -1.0], [9, 9]), [7, 7], cfg,
                        np.random.default_rng(3))
        np.testing.assert_allclose(pt.position, [1.3, 1.4])

    def test_scalar_draws_keep_direction(self):
        # one r1 and one r2 per update: with v = 0 and p = theta the move is parallel to g - theta
        pt = pso_update(particle([0, 0, 0], [0, 0, 0], [0, 0, 0]), [1.0, 2.0, 3.0],
                        SwarmConfig(), np.random.default_rng(5))
        np.testing.assert_allclose(pt.position / pt.position[0], [1, 2, 3])


class TestRandomSearch:
    def test_single_draw(self):
        best, pop, fit = random_search_init(1, 4, (-1, 1), np.random.default_rng(0), neg_sphere)
        np.testing.assert_array_equal(best, pop[0])

    def test_tie_breaks_to_first(self):
        best, pop, _ = random_search_init(6, 3, (-1, 1), np.random.default_rng(0),
                                          lambda x: np.zeros(len(x)))
        np.testing.assert_array_equal(best, pop[0])

    @given(st.integers(0, 1000), st.integers(1, 20))
    def test_argmax(self, seed, n):
        best, pop, fit = random_search_init(n, 3, (-2, 2), np.random.default_rng(seed), neg_sphere)
        assert neg_sphere(best)[0] >= fit.max()
        assert np.all((pop >= -2) & (pop <= 2))


class TestPsoOptimize:
    def test_zero_iterations_returns_random_search_best(self):
        cfg = SwarmConfig(n_iters=0, seed=4)
        g, g_fit, hist, _ = pso_optimize(cfg, neg_sphere, 5)
        _, pop, fit = random_search_init(30, 5, (-1, 1), np.random.default_rng(4), neg_sphere)
        np.testing.assert_array_equal(g, pop[np.argmax(fit)])
        assert len(hist) == 1

    def test_sphere(self):
        g, g_fit, hist, _ = pso_optimize(SwarmConfig(seed=0), neg_sphere, 5)
        assert np.linalg.norm(g) < 0.1

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_history(self, seed):
        _, _, hist, _ = pso_optimize(SwarmConfig(seed=seed, n_iters=30), neg_sphere, 4)
        best = [h.best_fitness for h in hist]
        assert all(b >= a for a, b in zip(best, best[1:]))

    def test_seed_determinism(self):
        a = pso_optimize(SwarmConfig(seed=9, n_iters=20), neg_sphere, 6)
        b = pso_optimize(SwarmConfig(seed=9, n_iters=20), neg_sphere, 6)
        np.testing.assert_array_equal(a[0], b[0])
        assert [h.best_fitness for h in a[2]] == [h.best_fitness for h in b[2]]

    def test_evaluation_count(self):
        cfg = SwarmConfig(n_init=4, n_particles=2, n_iters=3, n_episodes=2)
        subs = build_training_set()
        ev = EpisodeEvaluator(CIRL, subs, cfg.n_episodes)
        pso_optimize(cfg, ev, CIRL_LAYOUT.n_params)
        n = len(subs)
        assert ev.episodes == cfg.n_init * cfg.n_episodes * n + \
            cfg.n_iters * cfg.n_particles * cfg.n_episodes * n

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = pso_optimize(SwarmConfig(seed=2, n_iters=12), neg_sphere, 5)
        part = pso_optimize(SwarmConfig(seed=2, n_iters=5), neg_sphere, 5)
        path = tmp_path / "ckpt.json"
        save_checkpoint(part[3], path)
        resumed = pso_optimize(SwarmConfig(seed=2, n_iters=12), neg_sphere, 5,
                               resume=load_checkpoint(path))
        np.testing.assert_array_equal(resumed[0], full[0])
        assert [h.best_fitness for h in resumed[2]] == [h.best_fitness for h in full[2]]

    def test_consensus_swarm_is_stationary(self):
        cfg = SwarmConfig(n_init=3, n_particles=3, n_iters=4, seed=0)
        x = [0.2, -0.1]
        ckpt = {"iteration": 0, "rng_state": np.random.default_rng(0).bit_generator.state,
                "swarm": {"positions": [x] * 3, "velocities": [[0, 0]] * 3,
                          "best_positions": [x] * 3, "best_fitness": [-0.05] * 3,
                          "global_best": x, "global_best_fitness": -0.05}}
        _, _, hist, out = pso_optimize(cfg, neg_sphere, 2, resume=ckpt)
        assert out["swarm"]["positions"] == [x] * 3

    def test_learning_curve_bytes_stable(self, tmp_path):
        _, _, hist, _ = pso_optimize(SwarmConfig(seed=1, n_iters=5), neg_sphere, 3)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_learning_curve(a, hist)
        write_learning_curve(b, pso_optimize(SwarmConfig(seed=1, n_iters=5), neg_sphere, 3)[2])
        assert a.read_bytes() == b.read_bytes()
        assert a.read_text().splitlines()[0] == \
            "iteration,best_fitness,mean_fitness,min_fitness,wall_time_s"

    def test_train_policy_metadata(self):
        cfg = SwarmConfig(n_init=2, n_particles=2, n_iters=1, n_episodes=1, seed=3)
        p, hist, _ = train_policy(CIRL, [build_test_scenario()], cfg)
        assert p.kind == CIRL and p.metadata["seed"] == 3
        assert p.metadata["fitness"] == hist[-1].best_fitness


def hand_rollout(scenario, seed, n):
    """Step the plant by hand with a zero-parameter CIRL policy (constant mid-range gains)."""
    gains = 0.5 * (GAIN_LOW + GAIN_HIGH)
    z = np.random.default_rng(seed).standard_normal((scenario.n_s + 1, 3))
    std = np.array(scenario.noise)
    spans = np.array([1.0, 15.0])
    x = X0.copy()
    u = U_INIT.copy()
    meas = [x[[1, 3, 4]] + std * z[0]] * 3
    sps = [np.array(scenario.setpoint_at(0))] * 3
    total = 0.0
    for k in range(n):
        err = [(sps[i] - meas[i][[0, 2]]) / spans for i in range(3)]
        du = np.empty(2)
        for loop in range(2):
            kp, ti, td = gains[3 * loop:3 * loop + 3]
            e0, e1, e2 = err[0][loop], err[1][loop], err[2][loop]
            du[loop] = kp * (e0 - e1) + kp / max(ti, 1e-6) * e0 * DT + kp * td * (e0 - 2 * e1 + e2) / DT
        u_new = np.clip(u + du * ACTION_SPAN, ACTION_LOW, ACTION_HIGH)
        x = integrate_step(x, u_new)
        sp_next = np.array(scenario.setpoint_at(min(k + 1, scenario.n_s - 1)))
        e_true = (sp_next - x[[1, 4]]) / spans
        dun = (u_new - u) / ACTION_SPAN
        total += -(np.dot(scenario.q, e_true ** 2) + np.dot(scenario.r, dun ** 2))
        u = u_new
        meas = [x[[1, 3, 4]] + std * z[k + 1], meas[0], meas[1]]
        sps = [np.array(scenario.setpoint_at(min(k + 1, scenario.n_s - 1))), sps[0], sps[1]]
    return total


class TestRollout:
    def test_three_step_hand_trace(self):
        sc = Scenario("trace", thirds((0.3, 0.5, 0.7)), r=(0.2, 0.1))
        p = PolicyParams(np.zeros(CIRL_LAYOUT.n_params), CIRL_LAYOUT, CIRL)
        assert rollout(p, sc, 5, n_s=3) == pytest.approx(hand_rollout(sc, 5, 3), rel=1e-12)

    def test_fixed_point_zero_reward(self):
        layers = unpack(np.zeros(PURE_RL_LAYOUT.n_params), PURE_RL_LAYOUT)
        layers[-1][1][:] = [0.0, 2 * (100.0 - 99.0) / 6.0 - 1.0]
        p = PolicyParams(pack(layers), PURE_RL_LAYOUT, PURE_RL)
        sc = Scenario("still", thirds((0.0,), v_sp=102.0), noise=(0.0, 0.0, 0.0))
        assert rollout(p, sc, 0, params=CstrParams(k_a=0.0, k_b=0.0)) == pytest.approx(0.0, abs=1e-20)

    def test_deterministic(self):
        p = PolicyParams(np.random.default_rng(1).uniform(-1, 1, 854), CIRL_LAYOUT, CIRL)
        sc = build_test_scenario()
        assert rollout(p, sc, 4) == rollout(p, sc, 4)


class TestEvaluate:
    gains = PidGainSet(3.09, 0.03, 0.83, 0.84, 1.85, 0.08)

    def test_single_episode_equals_rollout(self):
        sc = build_test_scenario()
        assert evaluate(self.gains, [sc], 1, 7) == pytest.approx(rollout(self.gains, sc, 7))

    def test_zero_noise_episodes_identical(self):
        sc = build_test_scenario(noise=(0.0, 0.0, 0.0))
        assert evaluate(self.gains, [sc], 3) == pytest.approx(rollout(self.gains, sc, 0), rel=1e-12)

    def test_sum_of_sub_episodes(self):
        subs = build_training_set()
        parts = sum(rollout(self.gains, sc, 11) for sc in subs)
        assert evaluate(self.gains, subs, 1, 11) == pytest.approx(parts, rel=1e-12)

    def test_mean_over_episodes(self):
        sc = build_test_scenario()
        expected = np.mean([rollout(self.gains, sc, 20 + j) for j in range(3)])
        assert evaluate(self.gains, [sc], 3, 20) == pytest.approx(expected, rel=1e-12)

    def test_diverging_candidate_scores_minus_inf(self):
        wild = Scenario("wild", thirds((0.3,)), disturbance=((5, 1e300),))
        with pytest.raises(DivergenceError):
            rollout(self.gains, wild, 0)
        assert evaluate(self.gains, [wild]) == -np.inf


class TestDifferentialEvolution:
    def test_collapsed_box(self):
        point = np.array([1.0, 2.0, 0.5, 0.3, 1.0, 0.2])
        res = differential_evolution(neg_sphere, point, point, DeConfig(generations=3))
        np.testing.assert_array_equal(res.best, point)

    def test_candidates_feasible(self):
        res = differential_evolution(lambda x: -np.sum((x - 30) ** 2, axis=1), GAIN_LOW,
                                     GAIN_HIGH, DeConfig(generations=100), keep_candidates=True)
        cands = np.concatenate(res.evaluated)
        assert np.all(cands >= GAIN_LOW) and np.all(cands <= GAIN_HIGH)
        # the unconstrained optimum lies outside the box, so clipping pins the large gains
        np.testing.assert_array_equal(res.best[:3], GAIN_HIGH[:3])

    def test_monotone(self):
        res = differential_evolution(neg_sphere, -np.ones(3), np.ones(3), DeConfig(generations=20))
        best = [h.best_fitness for h in res.history]
        assert all(b >= a for a, b in zip(best, best[1:]))
        assert res.best_fitness > -1e-3

    def test_static_pid_within_bounds(self):
        g, res = de_tune_static_pid([build_test_scenario()], DeConfig(pop_size=4, generations=2),
                                    n_e=1)
        assert g.within_bounds()
        assert json.loads(json.dumps(g.to_dict()))["cb_loop"]["kp"] == g.kp_cb
