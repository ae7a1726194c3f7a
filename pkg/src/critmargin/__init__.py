"""Criticality estimation and proxy-based safety margins for RL policies."""
from .agents import (
    QTable, GreedyPolicy, SoftmaxPolicy, greedy_policy, softmax_policy, proxy_score_gap, train_q_learning,
)
from .collect import CollectionConfig, DataTuple, collect, read_tuples, write_tuples
from .envs import EnvSpec, make_env
from .margins import MarginTable, fit_kde, fit_margin_table, query_margin
from .truecrit import HorizonConfig, SamplingConfig, estimate_true_criticality, select_horizon

__version__ = "0.1.0"

__all__ = [
    "QTable", "GreedyPolicy", "SoftmaxPolicy", "greedy_policy", "softmax_policy", "proxy_score_gap",
    "train_q_learning",
    "CollectionConfig", "DataTuple", "collect", "read_tuples", "write_tuples",
    "EnvSpec", "make_env",
    "MarginTable", "fit_kde", "fit_margin_table", "query_margin",
    "HorizonConfig", "SamplingConfig", "estimate_true_criticality", "select_horizon",
]
