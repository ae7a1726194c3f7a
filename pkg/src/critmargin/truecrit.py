"""
Monte-Carlo estimation of true criticality.

The true criticality ``c(t, n)`` of a decision is the expected drop in
h-step discounted return when the policy's actions at steps ``t .. t+n-1``
are replaced by uniformly random ones.  :func:`estimate_true_criticality`
estimates it from repeated perturbed rollouts restored from an environment
snapshot and stops as soon as the Student-t half-width of the mean drops
to the requested sampling error.

Trials are generated in fixed-size blocks.  Row ``i`` of the random action
matrix always belongs to trial ``i`` and the stopping rule is applied to
the trial results strictly in index order.  The vectorized path used for
tabular worlds sees the same trials as the plain step-by-step path; it adds
the post-prefix return from a per-state table, so the two differ only by
floating-point summation order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import Env
from .errors import CapacityError
from .stats import t_quantile_two_sided

__all__ = [
    "HorizonConfig",
    "SamplingConfig",
    "CriticalityEstimate",
    "select_horizon",
    "discounted_rollout",
    "unperturbed_return",
    "snapshot_by_replay",
    "estimate_true_criticality",
    "exact_true_criticality_oracle",
]

TRIAL_BLOCK = 1024
MAX_BATCH_BLOCKS = 256
ORACLE_LIMIT = 10**5


def select_horizon(gamma: float, eps_hat: float) -> int:
    """Smallest ``h >= 1`` with ``gamma**h <= eps_hat`` (``ceil(log_gamma eps_hat)``)."""
    if not (0.0 < gamma < 1.0) or not (0.0 < eps_hat < 1.0):
        raise ValueError(f"gamma and eps_hat must lie in (0, 1), got {gamma}, {eps_hat}")
    h = max(1, math.ceil(math.log(eps_hat) / math.log(gamma)))
    # the float log ratio can land one off either way
    while gamma**h > eps_hat:
        h += 1
    while h > 1 and gamma ** (h - 1) <= eps_hat:
        h -= 1
    return h


@dataclass(frozen=True)
class HorizonConfig:
    gamma: float
    eps_horizon_target: float = 0.01
    horizon_steps: int = field(default=0)

    def __post_init__(self):
        h_min = select_horizon(self.gamma, self.eps_horizon_target)
        if self.horizon_steps == 0:
            object.__setattr__(self, "horizon_steps", h_min)
        elif self.horizon_steps < h_min:
            raise ValueError(
                f"horizon {self.horizon_steps} leaves gamma**h above {self.eps_horizon_target}"
            )


@dataclass(frozen=True)
class SamplingConfig:
    """Stopping-rule settings for one criticality estimate.

    ``stochastic_baseline`` re-runs the unperturbed rollout in every trial
    instead of caching one deterministic baseline; none of the built-in
    worlds need it.
    """

    eps_sampling_target: float = 0.2
    alpha: float = 0.95
    n_min: int = 10
    n_max: int = 1000
    stochastic_baseline: bool = False

    def __post_init__(self):
        if self.eps_sampling_target <= 0:
            raise ValueError("eps_sampling_target must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_min < 2:
            raise ValueError("n_min must be at least 2")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")

    def half_width(self, stdev: float, trials: int) -> float:
        if trials < 2:
            return 0.0
        return t_quantile_two_sided(self.alpha, trials - 1) * stdev / math.sqrt(trials)


@dataclass(frozen=True)
class CriticalityEstimate:
    value: float
    trials: int
    trial_stdev: float
    half_width: float
    converged: bool
    sim_steps: int = 0


def discounted_rollout(env: Env, policy, gamma: float, horizon: int, prefix: Sequence[int] = ()) -> tuple[float, int]:
    """Roll ``env`` forward from its current state; return (discounted return, steps).

    Actions come from ``prefix`` first, then from ``policy``.  Stops at the
    horizon or at episode termination.
    """
    ret = 0.0
    disc = 1.0
    obs = env.observation
    k = 0
    n_prefix = len(prefix)
    while k < horizon and not env.done:
        a = int(prefix[k]) if k < n_prefix else policy.act(obs)
        out = env.step(a)
        ret = ret + disc * out.reward
        disc *= gamma
        obs = out.observation
        k += 1
    return ret, k


def unperturbed_return(env: Env, policy, start_snapshot: bytes, horizon: HorizonConfig) -> float:
    env.load_state(start_snapshot)
    return discounted_rollout(env, policy, horizon.gamma, horizon.horizon_steps)[0]


def snapshot_by_replay(env: Env, initial_snapshot: bytes, actions: Sequence[int]) -> bytes:
    """Reach time step ``len(actions)`` by replaying from the episode start.

    Fallback for simulators that can only restore their initial state; valid
    whenever the environment is deterministic.
    """
    env.load_state(initial_snapshot)
    for a in actions:
        env.step(int(a))
    return env.save_state()


class _TabularRunner:
    """Lock-step rollouts of many trials over dense transition tables."""

    def __init__(self, env: Env, policy, gamma: float, horizon: int):
        dyn = env.dynamics()
        self.next_state = dyn.next_state
        self.reward = dyn.reward
        self.terminal = dyn.terminal
        self.max_steps = dyn.max_steps
        self.actions = np.array([policy.act(s) for s in range(env.n_states)], dtype=np.int64)
        self.start = env.observation
        self.start_steps = env.steps
        self.start_done = env.done
        self.gamma = gamma
        self.limit = min(horizon, self.max_steps - self.start_steps)
        self._tails: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _tail(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        # Discounted policy return and step count from every state once the
        # first n steps have been taken; computed for all states at once.
        cached = self._tails.get(n)
        if cached is not None:
            return cached
        n_states = self.next_state.shape[0]
        s = np.arange(n_states)
        alive = np.ones(n_states, dtype=bool)
        ret = np.zeros(n_states)
        steps = np.zeros(n_states, dtype=np.int64)
        disc = self.gamma**n
        for _ in range(n, self.limit):
            a = self.actions[s]
            ret = ret + disc * np.where(alive, self.reward[s, a], 0.0)
            steps += alive
            alive &= ~self.terminal[s, a]
            s = self.next_state[s, a]
            disc *= self.gamma
            if not alive.any():
                break
        self._tails[n] = (ret, steps)
        return ret, steps

    def run(self, prefixes: np.ndarray) -> tuple[np.ndarray, int]:
        b, n = prefixes.shape
        ret = np.zeros(b)
        if self.start_done:
            return ret, 0
        s = np.full(b, self.start, dtype=np.int64)
        alive = np.ones(b, dtype=bool)
        disc = 1.0
        steps = 0
        head = min(n, self.limit)
        for k in range(head):
            a = prefixes[:, k].astype(np.int64)
            ret = ret + disc * np.where(alive, self.reward[s, a], 0.0)
            steps += int(np.count_nonzero(alive))
            alive &= ~self.terminal[s, a]
            s = self.next_state[s, a]
            disc *= self.gamma
        if head < self.limit:
            tail_ret, tail_steps = self._tail(head)
            ret = ret + np.where(alive, tail_ret[s], 0.0)
            steps += int(tail_steps[s[alive]].sum())
        return ret, steps


def _serial_block(env: Env, policy, start: bytes, gamma: float, horizon: int,
                  prefixes: np.ndarray, replay: Sequence[int] | None) -> tuple[np.ndarray, int]:
    out = np.empty(len(prefixes))
    steps = 0
    for i, prefix in enumerate(prefixes):
        if replay is None:
            env.load_state(start)
        else:
            snapshot_by_replay(env, start, replay)
        out[i], k = discounted_rollout(env, policy, gamma, horizon, prefix)
        steps += k
    return out, steps


class _StoppingScan:
    """Applies the half-width stopping rule to trial results in index order."""

    def __init__(self, sampling: SamplingConfig):
        self.sampling = sampling
        self.count = 0
        self.s1 = 0.0
        self.s2 = 0.0
        self.shift = 0.0
        self.blocks: list[np.ndarray] = []

    def deltas(self) -> np.ndarray:
        if len(self.blocks) > 1:
            self.blocks = [np.concatenate(self.blocks)]
        return self.blocks[0]

    def push(self, delta: np.ndarray) -> int | None:
        """Append one batch; return the stopping trial count if it falls inside it."""
        sampling = self.sampling
        if self.count == 0:
            self.shift = float(delta[0])
        y = delta - self.shift
        c1 = self.s1 + np.cumsum(y)
        c2 = self.s2 + np.cumsum(y * y)
        first = self.count + 1
        self.count += len(delta)
        self.s1, self.s2 = float(c1[-1]), float(c2[-1])
        self.blocks.append(delta)

        lo = max(first, sampling.n_min)
        if lo > self.count:
            return None
        counts = np.arange(lo, self.count + 1, dtype=float)
        c1, c2 = c1[lo - first :], c2[lo - first :]
        var = np.maximum((c2 - c1 * c1 / counts) / (counts - 1.0), 0.0)
        se = np.sqrt(var / counts)
        eps = sampling.eps_sampling_target
        slack = eps * (1.0 + 1e-9)
        t_small = t_quantile_two_sided(sampling.alpha, self.count - 1)
        t_large = t_quantile_two_sided(sampling.alpha, lo - 1)
        for j in np.flatnonzero(t_small * se <= slack):
            n = lo + int(j)
            if t_large * se[j] > slack and t_quantile_two_sided(sampling.alpha, n - 1) * se[j] > slack:
                continue
            # confirm with a two-pass standard deviation of the exact prefix
            sd = float(np.std(self.deltas()[:n], ddof=1))
            if sampling.half_width(sd, n) <= eps:
                return n
        return None


def estimate_true_criticality(
    env: Env,
    policy,
    start_snapshot: bytes,
    n: int,
    horizon: HorizonConfig,
    sampling: SamplingConfig,
    seed=0,
    baseline: float | None = None,
    replay_actions: Sequence[int] | None = None,
    vectorize: bool = True,
) -> CriticalityEstimate:
    """Sample-mean estimate of the reward drop from ``n`` random actions.

    ``start_snapshot`` is the state at the decision step.  When
    ``replay_actions`` is given it is instead the episode's initial state and
    every trial replays those actions first.  ``baseline`` may be passed in
    to reuse a cached unperturbed return.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if getattr(policy, "stochastic", False):
        raise ValueError("criticality estimation requires a deterministic policy")
    if n == 0:
        return CriticalityEstimate(0.0, 0, 0.0, 0.0, True)

    gamma, h = horizon.gamma, horizon.horizon_steps
    if replay_actions is None:
        env.load_state(start_snapshot)
    else:
        snapshot_by_replay(env, start_snapshot, replay_actions)
    state_at_t = env.save_state()
    if baseline is None and not sampling.stochastic_baseline:
        baseline = discounted_rollout(env, policy, gamma, h)[0]
        env.load_state(state_at_t)

    runner = None
    if vectorize and hasattr(env, "dynamics"):
        runner = _TabularRunner(env, policy, gamma, h)

    def run(prefixes: np.ndarray) -> tuple[np.ndarray, int]:
        if runner is not None:
            return runner.run(prefixes)
        return _serial_block(env, policy, start_snapshot, gamma, h, prefixes, replay_actions)

    rng = np.random.default_rng(seed)
    n_actions = env.action_count
    scan = _StoppingScan(sampling)
    sim_steps = 0
    stop = None
    batch_blocks = 1
    while scan.count < sampling.n_max:
        rows = [
            rng.integers(0, n_actions, size=(TRIAL_BLOCK, n), dtype=np.int8)
            for _ in range(batch_blocks)
        ]
        prefixes = np.concatenate(rows)[: sampling.n_max - scan.count]
        perturbed, k = run(prefixes)
        sim_steps += k
        if sampling.stochastic_baseline:
            base, k = run(np.zeros((len(prefixes), 0), dtype=np.int8))
            sim_steps += k
            delta = base - perturbed
        else:
            delta = baseline - perturbed
        stop = scan.push(delta)
        if stop is not None:
            break
        batch_blocks = min(2 * batch_blocks, MAX_BATCH_BLOCKS)

    trials = stop if stop is not None else sampling.n_max
    used = scan.deltas()[:trials]
    value = float(np.mean(used))
    sd = float(np.std(used, ddof=1)) if trials >= 2 else 0.0
    half = sampling.half_width(sd, trials)
    return CriticalityEstimate(value, trials, sd, half, stop is not None, sim_steps)


def exact_true_criticality_oracle(env: Env, policy, start_snapshot: bytes, n: int, horizon: HorizonConfig) -> float:
    """Exact expectation over every one of the ``|A|**n`` perturbation prefixes."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 0.0
    count = env.action_count**n
    if count > ORACLE_LIMIT:
        raise CapacityError(f"|A|^n = {count} exceeds the oracle limit {ORACLE_LIMIT}")
    gamma, h = horizon.gamma, horizon.horizon_steps
    env.load_state(start_snapshot)
    baseline = discounted_rollout(env, policy, gamma, h)[0]
    returns = []
    for prefix in itertools.product(range(env.action_count), repeat=n):
        env.load_state(start_snapshot)
        returns.append(discounted_rollout(env, policy, gamma, h, prefix)[0])
    return baseline - math.fsum(returns) / count
