import logging

import numpy as np
import pytest
from scipy import stats as sps

from critmargin.agents import QTable, greedy_policy, proxy_score_gap
from critmargin.collect import (
    CollectionConfig,
    DataTuple,
    NEstimate,
    collect,
    collect_tuples,
    read_tuples,
    run_episode,
    select_timestep_uniform,
    write_tuples,
)
from critmargin.envs import EnvSpec, make_env
from critmargin.errors import CollectionError, ConfigurationError, TupleFormatError
from critmargin.truecrit import HorizonConfig, SamplingConfig

LINE = EnvSpec.parse("line_world(12)")
CLIFF = EnvSpec.parse("grid_cliff(4,12)")


def right_policy(length):
    # right is preferred by a margin that grows towards the goal, so proxies vary
    return greedy_policy(QTable(2, 0.9, None, {s: np.array([0.0, 1.0 + s]) for s in range(length + 1)}))


def line_config(**kw):
    base = dict(s_set=(1, 2), episodes_natural=3, episodes_uniform=3, exclude_tail_steps=2,
                horizon=HorizonConfig(0.9), sampling=SamplingConfig(0.2), seed=1)
    return CollectionConfig(**(base | kw))


def cliff_config(**kw):
    base = dict(s_set=(1, 2, 4), episodes_natural=100, episodes_uniform=100, exclude_tail_steps=4,
                horizon=HorizonConfig(0.99), sampling=SamplingConfig(0.2), seed=3)
    return CollectionConfig(**(base | kw))


def min_distance_sum(values):
    """Sum over picks of the distance to the nearest earlier pick (episode order).

    This is the quantity uniform-mode selection maximizes greedily; a plain
    nearest-neighbour sum is zero for both modes once proxies repeat.
    """
    v = list(values)
    return float(sum(min(abs(x - y) for y in v[:k]) for k, x in enumerate(v) if k))


@pytest.fixture(scope="module")
def cliff_collection(cliff_policy):
    return collect(CLIFF, cliff_policy, cliff_config())


class TestSelectUniform:
    def test_far_step_selected(self):
        assert select_timestep_uniform([0.1, 0.52, 2.0], [0.5], np.random.default_rng(0)) == 2

    def test_two_candidates(self):
        assert select_timestep_uniform([0.4, 0.9], [0.5], np.random.default_rng(0)) == 1

    def test_no_prior_is_uniform(self):
        rng = np.random.default_rng(0)
        counts = np.bincount([select_timestep_uniform([0.0] * 10, [], rng) for _ in range(10_000)], minlength=10)
        assert sps.chisquare(counts).pvalue > 0.001

    def test_ties_broken_randomly(self):
        picks = {select_timestep_uniform([0.0, 1.0], [0.5], np.random.default_rng(s)) for s in range(50)}
        assert picks == {0, 1}

    def test_empty(self):
        with pytest.raises(CollectionError):
            select_timestep_uniform([], [1.0], np.random.default_rng(0))


class TestConfig:
    def test_exclude_must_cover_s(self):
        with pytest.raises(ConfigurationError):
            line_config(s_set=(1, 4), exclude_tail_steps=3)

    @pytest.mark.parametrize("s", [(2, 1), (1, 1), (0, 1), ()])
    def test_ascending(self, s):
        with pytest.raises(ConfigurationError):
            line_config(s_set=s)


class TestCollect:
    def test_cardinality(self):
        tuples = collect_tuples(LINE, right_policy(12), line_config())
        assert len(tuples) == 6
        assert all(set(t.per_n) == {1, 2} for t in tuples)
        assert [t.mode for t in tuples] == ["natural"] * 3 + ["uniform"] * 3
        assert [t.episode_id for t in tuples] == list(range(6))

    def test_same_seed_same_file(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_tuples(collect_tuples(LINE, right_policy(12), line_config()), a)
        write_tuples(collect_tuples(LINE, right_policy(12), line_config()), b)
        assert a.read_bytes() == b.read_bytes()

    def test_worker_count_invariant(self, cliff_policy):
        cfg = cliff_config(episodes_natural=10, episodes_uniform=10)
        one = collect(CLIFF, cliff_policy, cfg, workers=1)
        two = collect(CLIFF, cliff_policy, cfg, workers=2)
        assert [t.to_json() for t in one.tuples] == [t.to_json() for t in two.tuples]
        assert one.sim_steps == two.sim_steps

    def test_short_episodes_skipped(self, caplog):
        cfg = line_config(exclude_tail_steps=6)  # the episode is exactly 6 steps long
        with caplog.at_level(logging.WARNING):
            result = collect(LINE, right_policy(12), cfg)
        assert result.tuples == [] and result.skipped == list(range(6))
        assert "skipped" in caplog.text

    def test_t_respects_tail(self, cliff_collection, cliff_policy):
        env = CLIFF.make()
        length = run_episode(env, cliff_policy, 0).length
        for t in cliff_collection.tuples:
            assert 0 <= t.t <= length - 4 - 1

    def test_mode_partition(self, cliff_collection):
        modes = [t.mode for t in cliff_collection.tuples]
        assert modes.count("natural") <= 100 and modes.count("uniform") <= 100
        ids = [t.episode_id for t in cliff_collection.tuples]
        assert len(ids) == len(set(ids))

    def test_proxy_recomputed_by_replay(self, cliff_collection, cliff_policy):
        for t in cliff_collection.tuples[:: 17]:
            env = CLIFF.make()
            trace = run_episode(env, cliff_policy, 0)
            env.reset(0)
            for a in trace.actions[: t.t]:
                env.step(a)
            assert proxy_score_gap(cliff_policy.scores(env.observation)) == t.proxy

    def test_uniform_more_dispersed(self, cliff_collection):
        nat = [t.proxy for t in cliff_collection.tuples if t.mode == "natural"]
        uni = [t.proxy for t in cliff_collection.tuples if t.mode == "uniform"]
        assert min_distance_sum(uni) > min_distance_sum(nat)

    @pytest.mark.xfail(
        strict=True,
        reason="on grid_cliff most steps of the greedy path border the cliff, so large proxies dominate "
        "and the natural-mode distribution is left-skewed",
    )
    def test_natural_proxies_right_skewed(self, cliff_policy):
        cfg = cliff_config(s_set=(1,), episodes_natural=200, episodes_uniform=0, sampling=SamplingConfig(5.0, n_max=20))
        p = np.array([t.proxy for t in collect_tuples(CLIFF, cliff_policy, cfg)])
        assert np.median(p) < p.mean()

    def test_estimates_recorded(self, cliff_collection):
        for t in cliff_collection.tuples:
            for e in t.per_n.values():
                assert 10 <= e.trials <= 1000 and e.stdev >= 0

    def test_paddle_collection(self):
        from conftest import trained_q

        pol = greedy_policy(trained_q("mini_paddle(4,4,3)", 2000, 0.2, 0.9))
        cfg = CollectionConfig((1, 2), 4, 4, 2, HorizonConfig(0.9), SamplingConfig(0.5), seed=2)
        tuples = collect_tuples(EnvSpec.parse("mini_paddle(4,4,3)"), pol, cfg)
        assert len(tuples) == 8


class TestTupleFiles:
    def test_round_trip(self, tmp_path, cliff_collection):
        path = tmp_path / "t.jsonl"
        write_tuples(cliff_collection.tuples, path)
        back = read_tuples(path)
        assert back == cliff_collection.tuples

    def test_empty(self, tmp_path):
        path = tmp_path / "t.jsonl"
        write_tuples([], path)
        assert path.read_bytes() == b"" and read_tuples(path) == []

    def test_corrupt_line_named(self, tmp_path):
        tuples = [DataTuple(i, 0, "natural", 0.1 * i, {1: NEstimate(0.5, 10, 0.1, True)}) for i in range(100)]
        path = tmp_path / "t.jsonl"
        write_tuples(tuples, path)
        lines = path.read_text().splitlines()
        lines[41] = lines[41][:-7]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TupleFormatError, match="line 42"):
            read_tuples(path)

    def test_unknown_fields_ignored(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text(
            '{"episode_id":0,"t":1,"mode":"uniform","proxy":0.25,"extra":[1],'
            '"per_n":{"1":{"c_star":0.5,"trials":10,"stdev":0.1,"converged":true,"note":"x"}}}\n'
        )
        (t,) = read_tuples(path)
        assert t == DataTuple(0, 1, "uniform", 0.25, {1: NEstimate(0.5, 10, 0.1, True)})

    def test_bad_mode(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"episode_id":0,"t":1,"mode":"other","proxy":0.25,"per_n":{}}\n')
        with pytest.raises(TupleFormatError, match="line 1"):
            read_tuples(path)

    def test_floats_round_trip_exactly(self, tmp_path):
        x = 0.1 + 0.2
        tup = DataTuple(0, 0, "natural", x, {1: NEstimate(x / 3, 10, x * 7, False)})
        path = tmp_path / "t.jsonl"
        write_tuples([tup], path)
        assert read_tuples(path) == [tup]
