from .routes import Route, builtin_route_names, get_route
from .world import (
    MARKING_COLOR,
    EpisodeStats,
    StepResult,
    WorldConfig,
    WorldState,
    compute_reward,
    render_observation,
    reset,
    rollout_episode,
    step,
    stats_of,
    to_float,
    write_trace_csv,
)

__all__ = [
    "MARKING_COLOR", "EpisodeStats", "Route", "StepResult", "WorldConfig", "WorldState",
    "builtin_route_names", "compute_reward", "get_route", "render_observation", "reset",
    "rollout_episode", "step", "stats_of", "to_float", "write_trace_csv",
]
