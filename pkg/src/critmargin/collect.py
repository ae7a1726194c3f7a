"""
Collection of (proxy, true criticality) data tuples.

Each episode is played to completion under the policy while the proxy is
recorded at every step.  One decision step is then picked per episode,
either uniformly at random ("natural" mode, following the visitation
distribution) or as the step whose proxy is farthest from every proxy
picked in earlier uniform-mode episodes ("uniform" mode, spreading samples
across proxy values).  True criticality is estimated at that step for every
perturbation length in ``s_set``.

Work is split into three phases so results do not depend on the number of
worker processes: episode rollouts (independent), step selection
(sequential for uniform mode), and criticality estimates (independent,
each seeded from ``(seed, episode_id, n)``).
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .agents import proxy_score_gap
from .envs import Env, EnvSpec
from .errors import CollectionError, ConfigurationError, TupleFormatError
from .truecrit import HorizonConfig, SamplingConfig, discounted_rollout, estimate_true_criticality

__all__ = [
    "NEstimate",
    "DataTuple",
    "CollectionConfig",
    "EpisodeTrace",
    "Collection",
    "run_episode",
    "select_timestep_uniform",
    "collect",
    "collect_tuples",
    "write_tuples",
    "read_tuples",
]

log = logging.getLogger(__name__)

MODES = ("natural", "uniform")
_STREAM_RESET, _STREAM_NATURAL, _STREAM_UNIFORM, _STREAM_ESTIMATE = range(4)


@dataclass(frozen=True)
class NEstimate:
    c_star: float
    trials: int
    stdev: float
    converged: bool


@dataclass
class DataTuple:
    episode_id: int
    t: int
    mode: str
    proxy: float
    per_n: dict[int, NEstimate]

    def to_json(self) -> str:
        doc = {
            "episode_id": self.episode_id,
            "t": self.t,
            "mode": self.mode,
            "proxy": self.proxy,
            "per_n": {
                str(n): {"c_star": e.c_star, "trials": e.trials, "stdev": e.stdev, "converged": e.converged}
                for n, e in sorted(self.per_n.items())
            },
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "DataTuple":
        mode = doc["mode"]
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        per_n = {
            int(n): NEstimate(float(v["c_star"]), int(v["trials"]), float(v["stdev"]), bool(v["converged"]))
            for n, v in doc["per_n"].items()
        }
        return cls(int(doc["episode_id"]), int(doc["t"]), mode, float(doc["proxy"]), per_n)


@dataclass(frozen=True)
class CollectionConfig:
    s_set: tuple[int, ...]
    episodes_natural: int
    episodes_uniform: int
    exclude_tail_steps: int
    horizon: HorizonConfig
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0

    def __post_init__(self):
        s = tuple(int(n) for n in self.s_set)
        object.__setattr__(self, "s_set", s)
        if not s or any(n < 1 for n in s) or any(a >= b for a, b in zip(s, s[1:])):
            raise ConfigurationError(f"s_set must be strictly ascending positive integers, got {s}")
        if self.exclude_tail_steps < max(s):
            raise ConfigurationError(
                f"exclude_tail_steps ({self.exclude_tail_steps}) must be >= max(s_set) ({max(s)})"
            )
        if self.episodes_natural < 0 or self.episodes_uniform < 0:
            raise ConfigurationError("episode counts must be non-negative")


@dataclass
class EpisodeTrace:
    episode_id: int
    proxies: list[float]
    actions: list[int]
    rewards: list[float]
    snapshots: list[bytes]  # state before the action at each step
    failed: bool

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class Collection:
    tuples: list[DataTuple]
    skipped: list[int]
    sim_steps: int
    total_trials: int


def _derive(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *path])


def episode_reset_seed(seed: int, episode_id: int) -> int:
    return int(_derive(seed, _STREAM_RESET, episode_id).generate_state(1)[0])


def run_episode(env: Env, policy, reset_seed: int, episode_id: int = 0) -> EpisodeTrace:
    """Play one full episode, recording the proxy and a snapshot at every step."""
    obs = env.reset(reset_seed)
    proxies, actions, rewards, snaps = [], [], [], []
    failed = False
    while not env.done:
        snaps.append(env.save_state())
        proxies.append(proxy_score_gap(policy.scores(obs)))
        a = policy.act(obs)
        out = env.step(a)
        actions.append(a)
        rewards.append(out.reward)
        failed = out.failure
        obs = out.observation
    return EpisodeTrace(episode_id, proxies, actions, rewards, snaps, failed)


def select_timestep_uniform(
    proxy_trace: Sequence[float], prior_proxies: Sequence[float], rng: np.random.Generator
) -> int:
    """Index of the step whose proxy is farthest from its nearest prior pick.

    Ties are broken uniformly at random; with no priors every step is
    equally likely.
    """
    p = np.asarray(proxy_trace, dtype=float)
    if p.size == 0:
        raise CollectionError("no eligible time steps to select from")
    if len(prior_proxies) == 0:
        return int(rng.integers(p.size))
    prior = np.sort(np.asarray(prior_proxies, dtype=float))
    pos = np.searchsorted(prior, p)
    left = np.abs(p - prior[np.clip(pos - 1, 0, prior.size - 1)])
    right = np.abs(prior[np.clip(pos, 0, prior.size - 1)] - p)
    dist = np.minimum(left, right)
    best = np.flatnonzero(dist == dist.max())
    return int(best[0]) if best.size == 1 else int(best[rng.integers(best.size)])


# Worker-process state; set once per process by _init_worker.
_W: dict = {}


def _init_worker(env_factory, policy, config: CollectionConfig) -> None:
    _W.update(env_factory=env_factory, policy=policy, config=config, env=None)


def _worker_env() -> Env:
    if _W.get("env") is None:
        _W["env"] = _W["env_factory"]()
    return _W["env"]


def _episode_job(episode_id: int) -> EpisodeTrace:
    cfg: CollectionConfig = _W["config"]
    return run_episode(_worker_env(), _W["policy"], episode_reset_seed(cfg.seed, episode_id), episode_id)


def _estimate_job(job: tuple[int, bytes]) -> tuple[dict[int, NEstimate], int, int]:
    episode_id, snapshot = job
    cfg: CollectionConfig = _W["config"]
    env, policy = _worker_env(), _W["policy"]
    env.load_state(snapshot)
    baseline = discounted_rollout(env, policy, cfg.horizon.gamma, cfg.horizon.horizon_steps)[0]
    per_n: dict[int, NEstimate] = {}
    steps = trials = 0
    for n in cfg.s_set:
        est = estimate_true_criticality(
            env, policy, snapshot, n, cfg.horizon, cfg.sampling,
            seed=_derive(cfg.seed, _STREAM_ESTIMATE, episode_id, n), baseline=baseline,
        )
        per_n[n] = NEstimate(est.value, est.trials, est.trial_stdev, est.converged)
        steps += est.sim_steps
        trials += est.trials
    return per_n, steps, trials


def _map(fn: Callable, items: Iterable, executor: ProcessPoolExecutor | None) -> list:
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items, chunksize=4))


def collect(
    env_factory: Callable[[], Env] | EnvSpec,
    policy,
    config: CollectionConfig,
    workers: int = 1,
) -> Collection:
    """Run the full collection procedure; see the module docstring."""
    if isinstance(env_factory, EnvSpec):
        env_factory = env_factory.make
    n_nat, n_uni = config.episodes_natural, config.episodes_uniform
    episode_ids = list(range(n_nat + n_uni))

    executor = None
    if workers > 1:
        executor = ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(env_factory, policy, config)
        )
    _init_worker(env_factory, policy, config)
    try:
        traces: list[EpisodeTrace] = _map(_episode_job, episode_ids, executor)

        picks: list[tuple[int, int, str, float]] = []
        skipped: list[int] = []
        prior: list[float] = []
        uniform_rng = np.random.default_rng(_derive(config.seed, _STREAM_UNIFORM))
        for trace in traces:
            mode = "natural" if trace.episode_id < n_nat else "uniform"
            eligible = trace.length - config.exclude_tail_steps
            if eligible < 1:
                log.warning(
                    "episode %d skipped: length %d <= exclude_tail_steps %d",
                    trace.episode_id, trace.length, config.exclude_tail_steps,
                )
                skipped.append(trace.episode_id)
                continue
            candidates = trace.proxies[:eligible]
            if mode == "natural":
                rng = np.random.default_rng(_derive(config.seed, _STREAM_NATURAL, trace.episode_id))
                t = int(rng.integers(eligible))
            else:
                t = select_timestep_uniform(candidates, prior, uniform_rng)
                prior.append(candidates[t])
            picks.append((trace.episode_id, t, mode, candidates[t]))

        snaps = {tr.episode_id: tr.snapshots for tr in traces}
        jobs = [(eid, snaps[eid][t]) for eid, t, _, _ in picks]
        del traces, snaps
        results = _map(_estimate_job, jobs, executor)
    finally:
        if executor is not None:
            executor.shutdown()

    tuples = []
    sim_steps = total_trials = 0
    for (eid, t, mode, proxy), (per_n, steps, trials) in zip(picks, results):
        tuples.append(DataTuple(eid, t, mode, proxy, per_n))
        log.info("episode %d (%s) t=%d proxy=%.4g trials=%d", eid, mode, t, proxy, trials)
        sim_steps += steps
        total_trials += trials
    return Collection(tuples, skipped, sim_steps, total_trials)


def collect_tuples(env_factory, policy, config: CollectionConfig, workers: int = 1) -> list[DataTuple]:
    return collect(env_factory, policy, config, workers).tuples


def write_tuples(tuples: Iterable[DataTuple], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tup in tuples:
            fh.write(tup.to_json())
            fh.write("\n")


def read_tuples(path: str | os.PathLike) -> list[DataTuple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(DataTuple.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise TupleFormatError(f"{path}: line {lineno}: {exc}") from exc
    return out
