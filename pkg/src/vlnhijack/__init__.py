"""Environmental texture attacks on a small vision-and-language navigation agent."""
from .agent import PolicyParams, forced_rollout, rollout, train_bc
from .attack import AttackConfig, AttackInstance, build_attack_instance, candidate_objects, optimize_attack
from .config import RunConfig, parse_config
from .environment import World
from .evaluation import MetricsReport, evaluate_instance
from .metrics import dtw, ndtw, oracle_success, success
from .worldgen import Episode, NavGraph, Scene, generate_episodes, generate_world, shortest_path

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackInstance", "Episode", "MetricsReport", "NavGraph", "PolicyParams", "RunConfig",
    "Scene", "World", "build_attack_instance", "candidate_objects", "dtw", "evaluate_instance",
    "forced_rollout", "generate_episodes", "generate_world", "ndtw", "optimize_attack", "oracle_success",
    "parse_config", "rollout", "shortest_path", "success", "train_bc",
]
