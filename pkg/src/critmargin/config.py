"""Run configuration: one JSON document with defaults for every pipeline stage."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from typing import Any, Mapping

from .agents import EpsilonSchedule
from .collect import CollectionConfig
from .envs import EnvSpec
from .errors import ConfigurationError
from .truecrit import HorizonConfig, SamplingConfig

__all__ = ["DEFAULTS", "RunConfig", "load_config"]

DEFAULTS: dict[str, Any] = {
    "env": "grid_cliff(4,12)",
    "policy": {
        "kind": "greedy",  # or "softmax"
        "temperature": 1.0,
        "table": None,  # existing q-table path; skips training when set
        "episodes": 5000,
        "learning_rate": 0.1,
        "exploration": {"start": 1.0, "end": 0.05, "decay_fraction": 0.8},
    },
    "gamma": 0.99,
    "eps_horizon": 0.01,
    "horizon_steps": 0,
    "eps_sampling": 0.2,
    "alpha": 0.95,
    "n_min": 10,
    "n_max": 1000,
    "stochastic_baseline": False,
    "beta": 0.95,
    "s_set": [1, 2, 4, 8, 16, 32],
    "episodes_natural": 500,
    "episodes_uniform": 500,
    "exclude_tail_steps": 32,
    "filter_fraction": 0.05,
    "seed": 0,
    "out": "out",
    "validate": {
        "train_fraction": 0.8,
        "split_seed": None,
        "episodes": 100,
        "zetas": None,  # None: 0.25/0.5/0.75 times the largest percentile
        "offsets": [1, 2, 4],
        "top_fraction": 0.05,
        "explore": 0.1,
    },
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "env":
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _number(doc: Mapping, key: str, lo: float | None = None, hi: float | None = None, open_: bool = True) -> float:
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"config key {key!r} must be a number, got {v!r}")
    if lo is not None and (v <= lo if open_ else v < lo):
        raise ConfigurationError(f"config key {key!r} = {v} is out of range")
    if hi is not None and (v >= hi if open_ else v > hi):
        raise ConfigurationError(f"config key {key!r} = {v} is out of range")
    return float(v)


def _integer(doc: Mapping, key: str, lo: int = 0) -> int:
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigurationError(f"config key {key!r} must be an integer >= {lo}, got {v!r}")
    return v


@dataclass(frozen=True)
class RunConfig:
    doc: dict

    @classmethod
    def from_dict(cls, doc: Mapping | None = None) -> "RunConfig":
        merged = _merge(DEFAULTS, doc or {})
        try:
            merged["env"] = EnvSpec.parse(merged["env"]).to_dict()
        except ConfigurationError as exc:
            raise ConfigurationError(f"config key 'env': {exc}") from None
        cfg = cls(merged)
        cfg._check()
        return cfg

    def _check(self) -> None:
        d = self.doc
        _number(d, "gamma", 0.0, 1.0)
        _number(d, "eps_horizon", 0.0, 1.0)
        _number(d, "eps_sampling", 0.0)
        _number(d, "alpha", 0.0, 1.0)
        _number(d, "beta", 0.0, 1.0)
        _number(d, "filter_fraction", 0.0, 1.0, open_=False)
        if d["filter_fraction"] >= 1.0:
            raise ConfigurationError("config key 'filter_fraction' must be below 1")
        _integer(d, "horizon_steps")
        _integer(d, "n_min", 2)
        _integer(d, "n_max", 2)
        if d["n_max"] < d["n_min"]:
            raise ConfigurationError("config key 'n_max' must be >= n_min")
        _integer(d, "episodes_natural")
        _integer(d, "episodes_uniform")
        _integer(d, "exclude_tail_steps")
        _integer(d, "seed")
        s = d["s_set"]
        if not isinstance(s, list) or not s or any(isinstance(n, bool) or not isinstance(n, int) for n in s):
            raise ConfigurationError("config key 's_set' must be a non-empty list of integers")
        if d["exclude_tail_steps"] < max(s):
            raise ConfigurationError("config key 'exclude_tail_steps' must be >= max(s_set)")
        p = d["policy"]
        if p["kind"] not in ("greedy", "softmax"):
            raise ConfigurationError("config key 'policy.kind' must be 'greedy' or 'softmax'")
        _number(p, "temperature", 0.0)
        _integer(p, "episodes")
        _number(p, "learning_rate", 0.0, 1.0 + 1e-12)
        v = d["validate"]
        _number(v, "train_fraction", 0.0, 1.0)
        _integer(v, "episodes")
        _number(v, "top_fraction", 0.0, 1.0)
        _number(v, "explore", 0.0, 1.0, open_=False)
        if not isinstance(v["offsets"], list) or any(not isinstance(k, int) or k < 1 for k in v["offsets"]):
            raise ConfigurationError("config key 'validate.offsets' must be a list of positive integers")
        # delegate remaining consistency checks to the owning types
        self.collection_config()
        self.exploration()

    def __getitem__(self, key: str) -> Any:
        return self.doc[key]

    def with_overrides(self, **kw: Any) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        doc.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(doc)

    @property
    def env_spec(self) -> EnvSpec:
        return EnvSpec.parse(self.doc["env"])

    def horizon(self) -> HorizonConfig:
        return HorizonConfig(self.doc["gamma"], self.doc["eps_horizon"], self.doc["horizon_steps"])

    def sampling(self) -> SamplingConfig:
        d = self.doc
        return SamplingConfig(d["eps_sampling"], d["alpha"], d["n_min"], d["n_max"], d["stochastic_baseline"])

    def exploration(self) -> EpsilonSchedule:
        try:
            return EpsilonSchedule.from_dict(self.doc["policy"]["exploration"])
        except TypeError as exc:
            raise ConfigurationError(f"config key 'policy.exploration': {exc}") from None

    def collection_config(self) -> CollectionConfig:
        d = self.doc
        try:
            return CollectionConfig(
                tuple(d["s_set"]), d["episodes_natural"], d["episodes_uniform"], d["exclude_tail_steps"],
                self.horizon(), self.sampling(), d["seed"],
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    def digest_doc(self) -> dict:
        """The config minus fields that must not affect outputs."""
        doc = copy.deepcopy(self.doc)
        doc.pop("out", None)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)
