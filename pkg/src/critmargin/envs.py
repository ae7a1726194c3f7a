"""
Deterministic, snapshot-capable toy environments.

Three worlds stand in for the Atari games used in the original experiments:

``line_world(L)``
    States ``0..L``; start at ``L // 2``.  Entering ``L`` pays +1 and ends
    the episode, entering ``0`` pays -1 and ends it as a failure.
``grid_cliff(rows, cols)``
    Classic cliff walk.  Start bottom-left, goal bottom-right, the bottom
    row in between is cliff (-100, terminal failure).  Every other move
    costs -1, including the move into the goal.
``mini_paddle(width, height, n_balls)``
    A ball falls one row per step and bounces off the side walls; the
    paddle on the bottom row must be under it on impact.  Catch +1, miss -1
    (terminal failure).  Ball launch positions come from a linear
    congruential sequence drawn at :meth:`Env.reset` and stored in the
    snapshot.

Snapshots are length-prefixed little-endian byte strings tagged with a
two-byte format version, so replaying from ``load_state(save_state())`` is
bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import ConfigurationError, SnapshotFormatError, UsageError

__all__ = [
    "SNAPSHOT_FORMAT",
    "StepOutcome",
    "TabularDynamics",
    "EnvSpec",
    "Env",
    "LineWorld",
    "GridCliff",
    "MiniPaddle",
    "make_env",
]

SNAPSHOT_FORMAT = 1

_HEADER = struct.Struct("<HH")
_COUNT = struct.Struct("<I")


@dataclass(frozen=True)
class StepOutcome:
    observation: int
    reward: float
    terminal: bool
    failure: bool = False
    # terminal only because the step cap was reached
    truncated: bool = False


@dataclass(frozen=True)
class TabularDynamics:
    """Dense transition tables for worlds whose whole state is one index.

    Rows for terminal states are self-loops with zero reward so vectorized
    rollouts can keep indexing them after a trial ends.
    """

    next_state: np.ndarray  # (S, A) int64
    reward: np.ndarray  # (S, A) float64
    terminal: np.ndarray  # (S, A) bool
    failure: np.ndarray  # (S, A) bool
    max_steps: int


@dataclass(frozen=True)
class EnvSpec:
    name: str
    params: tuple[int, ...]

    @classmethod
    def parse(cls, value: "EnvSpec | str | Mapping[str, Any]") -> "EnvSpec":
        """Accept ``EnvSpec``, ``"grid_cliff(4,12)"``, or ``{"name": ..., <params>}``."""
        if isinstance(value, EnvSpec):
            return value
        if isinstance(value, str):
            text = value.replace(" ", "")
            if "(" in text:
                if not text.endswith(")"):
                    raise ConfigurationError(f"malformed environment spec {value!r}")
                name, _, rest = text[:-1].partition("(")
                raw = [p for p in rest.split(",") if p]
            else:
                name, raw = text, []
            try:
                params = tuple(int(p) for p in raw)
            except ValueError as exc:
                raise ConfigurationError(f"non-integer parameter in {value!r}") from exc
            if name not in _PARAM_NAMES:
                raise ConfigurationError(f"unknown environment name {name!r}")
            if len(params) != len(_PARAM_NAMES[name]):
                raise ConfigurationError(f"{name} takes parameters {_PARAM_NAMES[name]}, got {params}")
            return cls(name, params)
        if isinstance(value, Mapping):
            if "name" not in value:
                raise ConfigurationError("environment spec needs a 'name' field")
            name = value["name"]
            if name not in _PARAM_NAMES:
                raise ConfigurationError(f"unknown environment name {name!r}")
            extra = set(value) - {"name", *_PARAM_NAMES[name]}
            if extra:
                raise ConfigurationError(f"unknown fields for {name}: {sorted(extra)}")
            missing = [p for p in _PARAM_NAMES[name] if p not in value]
            if missing:
                raise ConfigurationError(f"missing fields for {name}: {missing}")
            return cls(name, tuple(int(value[p]) for p in _PARAM_NAMES[name]))
        raise ConfigurationError(f"cannot interpret environment spec {value!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, **dict(zip(_PARAM_NAMES[self.name], self.params))}

    def make(self) -> "Env":
        return make_env(self)

    __call__ = make

    def __str__(self) -> str:
        return f"{self.name}({','.join(map(str, self.params))})"


class Env:
    """Base class holding episode bookkeeping and the snapshot contract."""

    name: str = ""
    action_count: int = 0

    def __init__(self, params: tuple[int, ...]):
        self.params = tuple(int(p) for p in params)
        self.steps = 0
        self.done = False
        self._failed = False

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(self.name, self.params)

    @property
    def observation(self) -> int:
        raise NotImplementedError

    @property
    def max_steps(self) -> int:
        raise NotImplementedError

    def reset(self, seed: int = 0) -> int:
        raise NotImplementedError

    def _transition(self, action: int) -> tuple[float, bool, bool]:
        raise NotImplementedError

    def _state_words(self) -> list[int]:
        raise NotImplementedError

    def _load_words(self, words: list[int]) -> None:
        raise NotImplementedError

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise UsageError(f"{self.spec}: step() called after the episode ended")
        if not 0 <= action < self.action_count:
            raise UsageError(f"{self.spec}: action {action} outside [0, {self.action_count})")
        reward, terminal, failure = self._transition(int(action))
        self.steps += 1
        truncated = False
        if not terminal and self.steps >= self.max_steps:
            terminal = truncated = True
        self.done = terminal
        self._failed = failure
        return StepOutcome(self.observation, reward, terminal, failure, truncated)

    def save_state(self) -> bytes:
        name = self.name.encode("ascii")
        words = [self.steps, int(self.done), int(self._failed), *self._state_words()]
        return b"".join(
            [
                _HEADER.pack(SNAPSHOT_FORMAT, len(name)),
                name,
                _COUNT.pack(len(self.params)),
                struct.pack(f"<{len(self.params)}q", *self.params),
                _COUNT.pack(len(words)),
                struct.pack(f"<{len(words)}q", *words),
            ]
        )

    def load_state(self, snapshot: bytes) -> None:
        name, params, words = _decode_snapshot(snapshot)
        if name != self.name or params != self.params:
            raise SnapshotFormatError(
                f"snapshot for {name}{params} cannot be loaded into {self.spec}"
            )
        self.steps, done, failed = words[:3]
        self.done, self._failed = bool(done), bool(failed)
        self._load_words(words[3:])

    def __repr__(self) -> str:
        return f"<{self.spec} t={self.steps} obs={self.observation} done={self.done}>"


def _decode_snapshot(snapshot: bytes) -> tuple[str, tuple[int, ...], list[int]]:
    try:
        view = memoryview(snapshot)
        tag, name_len = _HEADER.unpack_from(view, 0)
        if tag != SNAPSHOT_FORMAT:
            raise SnapshotFormatError(f"unsupported snapshot format tag {tag}")
        pos = _HEADER.size
        name = bytes(view[pos : pos + name_len]).decode("ascii")
        pos += name_len
        (n_params,) = _COUNT.unpack_from(view, pos)
        pos += _COUNT.size
        params = struct.unpack_from(f"<{n_params}q", view, pos)
        pos += 8 * n_params
        (n_words,) = _COUNT.unpack_from(view, pos)
        pos += _COUNT.size
        words = list(struct.unpack_from(f"<{n_words}q", view, pos))
        pos += 8 * n_words
    except (struct.error, UnicodeDecodeError) as exc:
        raise SnapshotFormatError(f"truncated or corrupt snapshot: {exc}") from exc
    if pos != len(snapshot):
        raise SnapshotFormatError("trailing bytes after snapshot payload")
    return name, tuple(params), words


class LineWorld(Env):
    name = "line_world"
    action_count = 2  # 0 = left, 1 = right

    def __init__(self, length: int):
        if length < 2:
            raise ConfigurationError(f"line_world needs L >= 2, got {length}")
        super().__init__((length,))
        self.length = length
        self.position = length // 2

    @property
    def observation(self) -> int:
        return self.position

    @property
    def max_steps(self) -> int:
        return 4 * self.length

    @property
    def n_states(self) -> int:
        return self.length + 1

    def reset(self, seed: int = 0) -> int:
        self.position = self.length // 2
        self.steps = 0
        self.done = self._failed = False
        return self.position

    def _move(self, pos: int, action: int) -> tuple[int, float, bool, bool]:
        nxt = pos + (1 if action == 1 else -1)
        if nxt == self.length:
            return nxt, 1.0, True, False
        if nxt == 0:
            return nxt, -1.0, True, True
        return nxt, 0.0, False, False

    def _transition(self, action: int) -> tuple[float, bool, bool]:
        self.position, reward, terminal, failure = self._move(self.position, action)
        return reward, terminal, failure

    def _state_words(self) -> list[int]:
        return [self.position]

    def _load_words(self, words: list[int]) -> None:
        (self.position,) = words

    def dynamics(self) -> TabularDynamics:
        return _tabulate(self, self.n_states, terminal_states={0, self.length})


class GridCliff(Env):
    name = "grid_cliff"
    action_count = 4  # up, down, left, right
    _DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, rows: int, cols: int):
        if rows < 2 or cols < 2:
            raise ConfigurationError(f"grid_cliff needs rows, cols >= 2, got ({rows}, {cols})")
        super().__init__((rows, cols))
        self.rows, self.cols = rows, cols
        self.start = (rows - 1) * cols
        self.goal = rows * cols - 1
        self.cliff = frozenset(range(self.start + 1, self.goal))
        self.cell = self.start

    @property
    def observation(self) -> int:
        return self.cell

    @property
    def max_steps(self) -> int:
        return 200

    @property
    def n_states(self) -> int:
        return self.rows * self.cols

    def reset(self, seed: int = 0) -> int:
        self.cell = self.start
        self.steps = 0
        self.done = self._failed = False
        return self.cell

    def _move(self, cell: int, action: int) -> tuple[int, float, bool, bool]:
        r, c = divmod(cell, self.cols)
        dr, dc = self._DELTAS[action]
        r = min(max(r + dr, 0), self.rows - 1)
        c = min(max(c + dc, 0), self.cols - 1)
        nxt = r * self.cols + c
        if nxt in self.cliff:
            return nxt, -100.0, True, True
        return nxt, -1.0, nxt == self.goal, False

    def _transition(self, action: int) -> tuple[float, bool, bool]:
        self.cell, reward, terminal, failure = self._move(self.cell, action)
        return reward, terminal, failure

    def _state_words(self) -> list[int]:
        return [self.cell]

    def _load_words(self, words: list[int]) -> None:
        (self.cell,) = words

    def dynamics(self) -> TabularDynamics:
        return _tabulate(self, self.n_states, terminal_states={self.goal, *self.cliff})


def _tabulate(env, n_states: int, terminal_states: set[int]) -> TabularDynamics:
    n_actions = env.action_count
    nxt = np.zeros((n_states, n_actions), dtype=np.int64)
    rew = np.zeros((n_states, n_actions))
    term = np.zeros((n_states, n_actions), dtype=bool)
    fail = np.zeros((n_states, n_actions), dtype=bool)
    for s in range(n_states):
        for a in range(n_actions):
            if s in terminal_states:
                nxt[s, a], term[s, a] = s, True
                continue
            nxt[s, a], rew[s, a], term[s, a], fail[s, a] = env._move(s, a)
    for arr in (nxt, rew, term, fail):
        arr.setflags(write=False)
    return TabularDynamics(nxt, rew, term, fail, env.max_steps)


_LCG_A = 1664525
_LCG_C = 1013904223
_LCG_M = 2**32


@dataclass
class _Ball:
    x: int = 0
    y: int = 0
    dx: int = 1


class MiniPaddle(Env):
    name = "mini_paddle"
    action_count = 3  # left, stay, right

    def __init__(self, width: int, height: int, n_balls: int):
        if width < 1 or height < 2 or n_balls < 1:
            raise ConfigurationError(
                f"mini_paddle needs width >= 1, height >= 2, n_balls >= 1, got ({width}, {height}, {n_balls})"
            )
        super().__init__((width, height, n_balls))
        self.width, self.height, self.n_balls = width, height, n_balls
        self.paddle = width // 2
        self.ball = _Ball()
        self.launches: list[tuple[int, int]] = []
        self.balls_done = 0
        self.reset(0)

    @property
    def observation(self) -> int:
        dx_bit = 1 if self.ball.dx > 0 else 0
        return ((self.paddle * self.width + self.ball.x) * self.height + self.ball.y) * 2 + dx_bit

    @property
    def max_steps(self) -> int:
        return self.n_balls * (self.height - 1)

    @property
    def n_states(self) -> int:
        return self.width * self.width * self.height * 2

    def reset(self, seed: int = 0) -> int:
        state = int(seed) % _LCG_M
        self.launches = []
        for _ in range(self.n_balls):
            state = (_LCG_A * state + _LCG_C) % _LCG_M
            x = (state >> 16) % self.width
            dx = 1 if (state >> 8) & 1 else -1
            self.launches.append((x, dx))
        self.paddle = self.width // 2
        self.balls_done = 0
        self.steps = 0
        self.done = self._failed = False
        self._launch()
        return self.observation

    def _launch(self) -> None:
        x, dx = self.launches[self.balls_done]
        self.ball = _Ball(x, 0, dx)

    def _transition(self, action: int) -> tuple[float, bool, bool]:
        w = self.width
        self.paddle = min(max(self.paddle + action - 1, 0), w - 1)
        b = self.ball
        b.y += 1
        if w > 1:
            x = b.x + b.dx
            if x < 0:
                x, b.dx = -x, -b.dx
            elif x > w - 1:
                x, b.dx = 2 * (w - 1) - x, -b.dx
            b.x = x
        if b.y < self.height - 1:
            return 0.0, False, False
        if b.x != self.paddle:
            return -1.0, True, True
        self.balls_done += 1
        if self.balls_done == self.n_balls:
            return 1.0, True, False
        self._launch()
        return 1.0, False, False

    def _state_words(self) -> list[int]:
        flat = [v for pair in self.launches for v in pair]
        return [self.paddle, self.ball.x, self.ball.y, self.ball.dx, self.balls_done, *flat]

    def _load_words(self, words: list[int]) -> None:
        self.paddle, x, y, dx, self.balls_done = words[:5]
        self.ball = _Ball(x, y, dx)
        flat = words[5:]
        self.launches = list(zip(flat[0::2], flat[1::2]))


_CLASSES: dict[str, type[Env]] = {
    "line_world": LineWorld,
    "grid_cliff": GridCliff,
    "mini_paddle": MiniPaddle,
}
_PARAM_NAMES: dict[str, tuple[str, ...]] = {
    "line_world": ("length",),
    "grid_cliff": ("rows", "cols"),
    "mini_paddle": ("width", "height", "n_balls"),
}


def make_env(spec: "EnvSpec | str | Mapping[str, Any]") -> Env:
    """Construct an environment in its initial state."""
    spec = EnvSpec.parse(spec)
    cls = _CLASSES.get(spec.name)
    if cls is None:
        raise ConfigurationError(f"unknown environment name {spec.name!r}")
    expected = _PARAM_NAMES[spec.name]
    if len(spec.params) != len(expected):
        raise ConfigurationError(f"{spec.name} takes parameters {expected}, got {spec.params}")
    if any(p <= 0 for p in spec.params):
        raise ConfigurationError(f"{spec.name} dimensions must be positive, got {spec.params}")
    return cls(*spec.params)
