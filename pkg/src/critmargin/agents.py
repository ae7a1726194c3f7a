"""Tabular Q-learning agents and the score-gap proxy criticality metric."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .envs import EnvSpec, make_env
from .errors import SnapshotFormatError, TrainingError

__all__ = [
    "QTable",
    "PolicyOutput",
    "EpsilonSchedule",
    "GreedyPolicy",
    "SoftmaxPolicy",
    "greedy_policy",
    "softmax_policy",
    "proxy_score_gap",
    "train_q_learning",
    "evaluate_policy",
]

log = logging.getLogger(__name__)

QTABLE_FORMAT = "critmargin.qtable"
QTABLE_VERSION = 1
DIVERGENCE_LIMIT = 1e6


@dataclass
class QTable:
    """Action values keyed by observation id; unseen states read as zeros."""

    action_count: int
    gamma: float
    env_spec: EnvSpec | None = None
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def row(self, obs: int) -> np.ndarray:
        v = self.values.get(obs)
        if v is None:
            return np.zeros(self.action_count)
        return v

    def to_json(self) -> str:
        entries = [
            [int(s), int(a), float(v)]
            for s in sorted(self.values)
            for a, v in enumerate(self.values[s])
        ]
        doc = {
            "format": QTABLE_FORMAT,
            "version": QTABLE_VERSION,
            "env_spec": self.env_spec.to_dict() if self.env_spec else None,
            "gamma": self.gamma,
            "action_count": self.action_count,
            "entries": entries,
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SnapshotFormatError(f"q-table is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != QTABLE_FORMAT:
            raise SnapshotFormatError("not a critmargin q-table document")
        if doc.get("version") != QTABLE_VERSION:
            raise SnapshotFormatError(f"unsupported q-table version {doc.get('version')!r}")
        n_actions = int(doc["action_count"])
        spec = EnvSpec.parse(doc["env_spec"]) if doc.get("env_spec") else None
        values: dict[int, np.ndarray] = {}
        for s, a, v in doc["entries"]:
            values.setdefault(int(s), np.zeros(n_actions))[int(a)] = float(v)
        return cls(n_actions, float(doc["gamma"]), spec, values)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "QTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class PolicyOutput:
    scores: np.ndarray
    kind: str  # "q_values" or "log_probs"


def proxy_score_gap(output: PolicyOutput | np.ndarray) -> float:
    """Largest minus smallest per-action score."""
    scores = output.scores if isinstance(output, PolicyOutput) else np.asarray(output, dtype=float)
    if scores.size < 2:
        raise ValueError("proxy needs scores for at least two actions")
    return float(np.max(scores) - np.min(scores))


class GreedyPolicy:
    """argmax over Q values, ties to the lowest action id."""

    kind = "q_values"
    stochastic = False

    def __init__(self, q: QTable):
        self.q = q
        self.action_count = q.action_count
        self._acts: dict[int, int] = {}

    def scores(self, obs: int) -> PolicyOutput:
        return PolicyOutput(self.q.row(obs).copy(), self.kind)

    def act(self, obs: int, rng: np.random.Generator | None = None) -> int:
        a = self._acts.get(obs)
        if a is None:
            a = self._acts[obs] = int(np.argmax(self.scores(obs).scores))
        return a

    def proxy(self, obs: int) -> float:
        return proxy_score_gap(self.scores(obs))


class SoftmaxPolicy(GreedyPolicy):
    """Scores are log-softmax of ``Q / temperature``.

    Deployment stays argmax unless ``sample=True``; the sampling variant draws
    from the softmax with a caller-supplied generator and is only meant for
    running evaluation episodes, never for criticality estimation.
    """

    kind = "log_probs"

    def __init__(self, q: QTable, temperature: float = 1.0, sample: bool = False):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        super().__init__(q)
        self.temperature = temperature
        self.stochastic = sample

    def scores(self, obs: int) -> PolicyOutput:
        z = self.q.row(obs) / self.temperature
        z = z - np.max(z)
        return PolicyOutput(z - np.log(np.sum(np.exp(z))), self.kind)

    def act(self, obs: int, rng: np.random.Generator | None = None) -> int:
        if not self.stochastic:
            return super().act(obs)
        if rng is None:
            raise ValueError("sampling softmax policy needs a random generator")
        p = np.exp(self.scores(obs).scores)
        return int(rng.choice(self.action_count, p=p / p.sum()))


def greedy_policy(q: QTable) -> GreedyPolicy:
    return GreedyPolicy(q)


def softmax_policy(q: QTable, temperature: float = 1.0, sample: bool = False) -> SoftmaxPolicy:
    return SoftmaxPolicy(q, temperature, sample)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over the first ``decay_fraction`` of training."""

    start: float = 1.0
    end: float = 0.05
    decay_fraction: float = 0.8

    def at(self, episode: int, total: int) -> float:
        span = max(1.0, self.decay_fraction * total)
        frac = min(1.0, episode / span)
        return self.start + (self.end - self.start) * frac

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "EpsilonSchedule":
        return cls(**d) if d else cls()


def train_q_learning(
    env_spec,
    episodes: int,
    learning_rate: float,
    gamma: float,
    exploration: EpsilonSchedule | None = None,
    seed: int = 0,
) -> QTable:
    """One-step Q-learning with an epsilon-greedy behaviour policy.

    Deterministic given ``seed``.  Raises :class:`TrainingError` if any value
    leaves ``[-1e6, 1e6]``.
    """
    if episodes < 0:
        raise ValueError("episodes must be non-negative")
    if not 0 < learning_rate <= 1:
        raise ValueError("learning_rate must lie in (0, 1]")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    spec = EnvSpec.parse(env_spec)
    env = make_env(spec)
    schedule = exploration or EpsilonSchedule()
    rng = np.random.default_rng(seed)
    n_actions = env.action_count
    values: dict[int, np.ndarray] = {}

    def row(s: int) -> np.ndarray:
        v = values.get(s)
        if v is None:
            v = values[s] = np.zeros(n_actions)
        return v

    for ep in range(episodes):
        eps = schedule.at(ep, episodes)
        s = env.reset(int(rng.integers(2**31)))
        while not env.done:
            q_s = row(s)
            if rng.random() < eps:
                a = int(rng.integers(n_actions))
            else:
                a = int(np.argmax(q_s))
            out = env.step(a)
            target = out.reward
            if not out.terminal or out.truncated:
                target += gamma * float(np.max(row(out.observation)))
            q_s[a] += learning_rate * (target - q_s[a])
            if abs(q_s[a]) > DIVERGENCE_LIMIT:
                raise TrainingError(
                    f"Q({s}, {a}) = {q_s[a]:.3g} after episode {ep} (lr={learning_rate}, gamma={gamma})"
                )
            s = out.observation
    return QTable(n_actions, gamma, spec, values)


def evaluate_policy(env_spec, policy, episodes: int = 100, seed: int = 0) -> float:
    """Mean undiscounted return over seeded evaluation episodes."""
    env = make_env(env_spec)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(int(rng.integers(2**31)))
        ret = 0.0
        while not env.done:
            out = env.step(policy.act(obs, rng))
            ret += out.reward
            obs = out.observation
        total += ret
    return total / episodes
