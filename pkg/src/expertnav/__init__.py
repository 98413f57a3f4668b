"""Multi-expert discussion agent for graph-world instruction following."""

from .backends import OracleBackend, RecordingBackend, RemoteBackend, ReplayBackend, ScriptedBackend
from .engine import AgentConfig, EpisodeAborted, EpisodeResult, check_discussion_order, run_episode
from .environment import EnvGraph, Episode, MetricsReport, compute_metrics, geodesic, load_episodes, load_world
from .harness import SuiteConfig, generate_fixtures, run_ablations, run_suite

__all__ = [
    "AgentConfig",
    "EnvGraph",
    "Episode",
    "EpisodeAborted",
    "EpisodeResult",
    "MetricsReport",
    "OracleBackend",
    "RecordingBackend",
    "RemoteBackend",
    "ReplayBackend",
    "ScriptedBackend",
    "SuiteConfig",
    "check_discussion_order",
    "compute_metrics",
    "generate_fixtures",
    "geodesic",
    "load_episodes",
    "load_world",
    "run_ablations",
    "run_episode",
    "run_suite",
]
