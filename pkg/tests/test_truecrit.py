import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critmargin.agents import QTable, greedy_policy, softmax_policy
from critmargin.envs import make_env
from critmargin.errors import CapacityError, SnapshotFormatError
from critmargin.stats import t_quantile_two_sided
from critmargin.truecrit import (
    discounted_rollout,
    HorizonConfig,
    SamplingConfig,
    estimate_true_criticality,
    exact_true_criticality_oracle,
    select_horizon,
    snapshot_by_replay,
    unperturbed_return,
)

from conftest import trained_q


def right_policy(length):
    return greedy_policy(QTable(2, 0.9, None, {s: np.array([0.0, 1.0]) for s in range(length + 1)}))


def line_at(length, pos):
    env = make_env(f"line_world({length})")
    env.position = pos
    return env, env.save_state()


class TestHorizon:
    def test_459(self):
        assert select_horizon(0.99, 0.01) == 459

    def test_one(self):
        assert select_horizon(0.5, 0.5) == 1

    def test_44_by_repeated_multiplication(self):
        p = 1.0
        for _ in range(43):
            p *= 0.9
        assert p > 0.01 and p * 0.9 <= 0.01
        assert select_horizon(0.9, 0.01) == 44

    @pytest.mark.parametrize("gamma,eps", [(1.0, 0.01), (0.0, 0.01), (0.9, 1.0), (0.9, 0.0)])
    def test_bad_args(self, gamma, eps):
        with pytest.raises(ValueError):
            select_horizon(gamma, eps)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0.01, 0.9999), st.floats(1e-9, 0.99))
    def test_smallest_sufficient(self, gamma, eps):
        h = select_horizon(gamma, eps)
        assert gamma**h <= eps
        assert h == 1 or gamma ** (h - 1) > eps

    def test_config(self):
        assert HorizonConfig(0.99).horizon_steps == 459
        assert HorizonConfig(0.99, 0.01, 500).horizon_steps == 500
        with pytest.raises(ValueError):
            HorizonConfig(0.99, 0.01, 100)


class TestSamplingConfig:
    @pytest.mark.parametrize("kw", [dict(n_min=1), dict(n_min=20, n_max=10), dict(alpha=1.0), dict(eps_sampling_target=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplingConfig(**kw)


class TestUnperturbed:
    def test_one_step(self):
        env, snap = line_at(4, 3)
        assert unperturbed_return(env, right_policy(4), snap, HorizonConfig(0.9)) == 1.0

    def test_two_steps(self):
        env, snap = line_at(4, 2)
        assert unperturbed_return(env, right_policy(4), snap, HorizonConfig(0.9)) == pytest.approx(0.9)

    def test_terminal_start(self):
        env = make_env("line_world(4)")
        env.step(1)
        env.step(1)
        assert unperturbed_return(env, right_policy(4), env.save_state(), HorizonConfig(0.9)) == 0.0

    def test_snapshot_mismatch(self):
        snap = make_env("grid_cliff(3,4)").save_state()
        with pytest.raises(SnapshotFormatError):
            unperturbed_return(make_env("line_world(4)"), right_policy(4), snap, HorizonConfig(0.9))


class TestOracle:
    def test_two_branch(self):
        # both actions end the episode on the first step, so gamma never enters
        env, snap = line_at(2, 1)
        assert exact_true_criticality_oracle(env, right_policy(2), snap, 1, HorizonConfig(0.9)) == 1.0

    def test_four_branch_hand_value(self):
        env, snap = line_at(4, 2)
        # LL -> -0.9, LR and RL -> 0.9**3, RR -> 0.9; baseline 0.9
        expected = 0.9 - (-0.9 + 2 * 0.9**3 + 0.9) / 4
        got = exact_true_criticality_oracle(env, right_policy(4), snap, 2, HorizonConfig(0.9))
        assert got == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.5355)

    def test_n_zero(self):
        env, snap = line_at(4, 2)
        assert exact_true_criticality_oracle(env, right_policy(4), snap, 0, HorizonConfig(0.9)) == 0.0

    def test_action_irrelevant(self):
        # a one-column paddle cannot move, so every action has the same future
        env = make_env("mini_paddle(1,4,2)")
        pol = greedy_policy(QTable(3, 0.9, None, {}))
        assert exact_true_criticality_oracle(env, pol, env.save_state(), 3, HorizonConfig(0.9)) == 0.0

    def test_capacity_guard(self):
        env = make_env("grid_cliff(3,4)")
        with pytest.raises(CapacityError):
            exact_true_criticality_oracle(env, right_policy(4), env.save_state(), 9, HorizonConfig(0.9))


class TestEstimate:
    def test_n_zero_identity(self):
        env, snap = line_at(4, 2)
        for seed in range(5):
            est = estimate_true_criticality(env, right_policy(4), snap, 0, HorizonConfig(0.9), SamplingConfig(), seed)
            assert (est.value, est.trials, est.converged) == (0.0, 0, True)

    def test_two_branch_converges_to_one(self):
        env, snap = line_at(2, 1)
        est = estimate_true_criticality(env, right_policy(2), snap, 1, HorizonConfig(0.9), SamplingConfig(0.02, n_max=10**6), 0)
        assert est.converged and abs(est.value - 1.0) <= 0.02

    def test_four_branch_within_eps(self):
        env, snap = line_at(4, 2)
        sampling = SamplingConfig(0.05, n_max=10**6)
        est = estimate_true_criticality(env, right_policy(4), snap, 2, HorizonConfig(0.9), sampling, 3)
        assert abs(est.value - 0.5355) <= 0.05

    def test_seed_determinism(self, cliff_policy):
        env = make_env("grid_cliff(4,12)")
        snap = env.save_state()
        args = (env, cliff_policy, snap, 2, HorizonConfig(0.99), SamplingConfig(0.5))
        assert estimate_true_criticality(*args, seed=9) == estimate_true_criticality(*args, seed=9)

    def test_rejects_stochastic_policy(self):
        env, snap = line_at(4, 2)
        pol = softmax_policy(QTable(2, 0.9), 1.0, sample=True)
        with pytest.raises(ValueError):
            estimate_true_criticality(env, pol, snap, 1, HorizonConfig(0.9), SamplingConfig())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10**6), st.sampled_from([0.05, 0.2, 1.0]), st.integers(1, 10))
    def test_trial_bounds_and_convergence_flag(self, n, seed, eps, cell):
        q = trained_q("grid_cliff(3,4)", 2000, 0.1, 0.99)
        env = make_env("grid_cliff(3,4)")
        env.cell = cell if cell not in env.cliff else env.start
        sampling = SamplingConfig(eps, 0.95, 10, 3000)
        est = estimate_true_criticality(env, greedy_policy(q), env.save_state(), n, HorizonConfig(0.99), sampling, seed)
        assert sampling.n_min <= est.trials <= sampling.n_max
        if est.converged:
            assert est.half_width <= eps
        else:
            assert est.trials == sampling.n_max
        assert est.half_width == pytest.approx(sampling.half_width(est.trial_stdev, est.trials), rel=1e-12)

    def test_stopping_rule_is_first_passing_n(self, cliff_policy):
        # recompute the rule trial by trial on the serial path's deltas
        env = make_env("grid_cliff(4,12)")
        env.step(0)
        snap = env.save_state()
        sampling = SamplingConfig(2.0, 0.95, 10, 5000)
        est = estimate_true_criticality(env, cliff_policy, snap, 1, HorizonConfig(0.99), sampling, 5)
        rng = np.random.default_rng(5)
        prefixes = np.concatenate([rng.integers(0, 4, size=(1024, 1), dtype=np.int8) for _ in range(8)])
        base = unperturbed_return(env, cliff_policy, snap, HorizonConfig(0.99))
        deltas = []
        for row in prefixes[: est.trials]:
            env.load_state(snap)
            deltas.append(base - discounted_rollout(env, cliff_policy, 0.99, 459, row)[0])
        d = np.array(deltas)

        def passes(k):
            return t_quantile_two_sided(0.95, k - 1) * np.std(d[:k], ddof=1) / math.sqrt(k) <= 2.0
        assert passes(est.trials)
        assert not any(passes(k) for k in range(10, est.trials))
        assert est.value == pytest.approx(d.mean(), abs=1e-12)

    @pytest.mark.parametrize("spec,episodes,cell", [("grid_cliff(3,4)", 2000, 4), ("line_world(6)", 500, 2), ("grid_cliff(4,12)", 3000, 36)])
    def test_vectorized_matches_serial(self, spec, episodes, cell):
        q = trained_q(spec, episodes, 0.2, 0.9)
        pol = greedy_policy(q)
        env = make_env(spec)
        if hasattr(env, "cell"):
            env.cell = cell
        else:
            env.position = cell
        snap = env.save_state()
        for n in (1, 2, 3):
            a = estimate_true_criticality(env, pol, snap, n, HorizonConfig(0.9), SamplingConfig(0.2, n_max=3000), 7)
            b = estimate_true_criticality(env, pol, snap, n, HorizonConfig(0.9), SamplingConfig(0.2, n_max=3000), 7, vectorize=False)
            assert a.trials == b.trials and a.sim_steps == b.sim_steps and a.converged == b.converged
            assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_replay_matches_snapshot(self, cliff_policy):
        env = make_env("grid_cliff(4,12)")
        start = env.save_state()
        actions = [0, 3, 3, 3]
        snap = snapshot_by_replay(env, start, actions)
        h, s = HorizonConfig(0.99), SamplingConfig(1.0)
        a = estimate_true_criticality(env, cliff_policy, snap, 2, h, s, 1, vectorize=False)
        b = estimate_true_criticality(env, cliff_policy, start, 2, h, s, 1, replay_actions=actions, vectorize=False)
        assert a == b

    def test_stochastic_baseline_flag_agrees_on_deterministic_worlds(self):
        env, snap = line_at(4, 2)
        h = HorizonConfig(0.9)
        a = estimate_true_criticality(env, right_policy(4), snap, 2, h, SamplingConfig(0.1, n_max=10**5), 2)
        b = estimate_true_criticality(env, right_policy(4), snap, 2, h, SamplingConfig(0.1, n_max=10**5, stochastic_baseline=True), 2)
        assert a.value == pytest.approx(b.value, abs=1e-12) and a.trials == b.trials
        assert b.sim_steps > a.sim_steps

    def test_paddle_serial_path(self):
        q = trained_q("mini_paddle(4,4,2)", 2000, 0.2, 0.9)
        env = make_env("mini_paddle(4,4,2)")
        env.reset(5)
        snap = env.save_state()
        pol = greedy_policy(q)
        h = HorizonConfig(0.9)
        exact = exact_true_criticality_oracle(env, pol, snap, 2, h)
        est = estimate_true_criticality(env, pol, snap, 2, h, SamplingConfig(0.05, n_max=10**5), 0)
        assert abs(est.value - exact) <= 0.05

    @pytest.mark.parametrize("spec,episodes", [("grid_cliff(3,4)", 2000), ("line_world(6)", 500), ("mini_paddle(4,4,2)", 2000)])
    def test_horizon_soundness(self, spec, episodes):
        pol = greedy_policy(trained_q(spec, episodes, 0.2, 0.9))
        env = make_env(spec)
        env.reset(1)
        snap = env.save_state()
        h0 = select_horizon(0.9, 1e-6)
        base = unperturbed_return(env, pol, snap, HorizonConfig(0.9, 1e-6))
        s = SamplingConfig(0.2, n_max=2000)
        a = estimate_true_criticality(env, pol, snap, 2, HorizonConfig(0.9, 1e-6), s, 3)
        b = estimate_true_criticality(env, pol, snap, 2, HorizonConfig(0.9, 1e-6, h0 + 100), s, 3)
        assert abs(a.value - b.value) <= 1e-4 * abs(base) + 1e-12


def test_oracle_agreement_small_sample():
    # the full 200-estimate version lives in the acceptance suite
    hits = total = 0
    for length in (4, 6):
        pol = right_policy(length)
        for pos in range(1, length):
            env, snap = line_at(length, pos)
            for n in (1, 2, 3):
                exact = exact_true_criticality_oracle(env, pol, snap, n, HorizonConfig(0.9))
                est = estimate_true_criticality(env, pol, snap, n, HorizonConfig(0.9), SamplingConfig(0.05, n_min=100, n_max=10**7), 100 * pos + n)
                hits += abs(est.value - exact) <= 0.05
                total += 1
    assert hits / total >= 0.92
