"""Seedable 2D lane-keeping world with stacked top-down observations.

The ego car follows a kinematic bicycle model at a fixed autopilot speed; the
only control is steering. Each step charges ``-lane_penalty`` while the car's
centre is outside the lane and ``-collision_penalty`` on contact with an
obstacle or a roadside wall, which also ends the episode.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import kernels
from ..errors import ConfigError, ProtocolError
from .routes import Route, get_route

# background, road, lane marking, obstacle
PALETTE = np.array([[34, 102, 51], [96, 96, 96], [255, 255, 255], [220, 40, 40]],
                   dtype=np.float64)
MARKING_COLOR = (255, 255, 255)


@dataclass(frozen=True)
class WorldConfig:
    route_id: str = "straight"
    frame_size: int = 64
    stack_length: int = 4
    max_steps: int = 400
    lane_penalty: float = 2.0
    collision_penalty: float = 30.0
    dt: float = 0.1
    speed: float = 5.0
    wheelbase: float = 2.5
    max_steer_deg: float = 30.0
    lane_half_width: float = 1.75
    vehicle_length: float = 4.0
    vehicle_width: float = 1.8
    # width of ground covered by one frame, metres
    view_meters: float = 32.0
    # walls this far from the centreline (m); touching one is a collision, 0 disables
    barrier_offset: float = 3.5
    routes_file: str | None = None

    def __post_init__(self):
        if self.frame_size < 16:
            raise ConfigError("frame_size must be >= 16")
        if self.stack_length < 1:
            raise ConfigError("stack_length must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.lane_penalty < 0 or self.collision_penalty < 0:
            raise ConfigError("penalty coefficients must be non-negative")
        if self.dt <= 0 or self.speed < 0 or self.wheelbase <= 0 or self.view_meters <= 0:
            raise ConfigError("dt, wheelbase and view_meters must be positive, speed >= 0")
        if self.lane_half_width <= self.vehicle_width / 2:
            raise ConfigError("lane_half_width must exceed half the vehicle width")
        if self.barrier_offset and self.barrier_offset <= self.lane_half_width:
            raise ConfigError("barrier_offset must lie outside the lane (or be 0)")

    @property
    def meters_per_pixel(self) -> float:
        return self.view_meters / self.frame_size


@dataclass
class WorldState:
    config: WorldConfig
    route: Route
    x: float
    y: float
    heading: float
    speed: float
    step: int
    frames: np.ndarray
    rng: np.random.Generator
    lateral_offset: float = 0.0
    done: bool = False
    total_reward: float = 0.0
    lane_invasions: int = 0
    collisions: int = 0
    spawn_s: float = 0.0

    def obstacle_positions(self) -> np.ndarray:
        """World ``(x, y, radius)`` of every obstacle at the current step."""
        obs = self.route.obstacles
        if not len(obs):
            return np.zeros((0, 3))
        t = self.step * self.config.dt
        rows = []
        for s0, d0, radius, vs, vd in obs:
            x, y = self.route.point_at(s0 + vs * t, d0 + vd * t)
            rows.append((x, y, radius))
        return np.asarray(rows, dtype=np.float64)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeStats:
    total_reward: float = 0.0
    steps: int = 0
    lane_invasions: int = 0
    collisions: int = 0

    def check(self, config: WorldConfig):
        expected = -config.lane_penalty * self.lane_invasions - config.collision_penalty * self.collisions
        if self.total_reward != expected:
            raise AssertionError(f"reward accounting broken: {self.total_reward} != {expected}")
        if self.steps > config.max_steps:
            raise AssertionError("episode longer than max_steps")


def compute_reward(lane_invaded: bool, collided: bool, config: WorldConfig) -> float:
    return -config.lane_penalty * float(bool(lane_invaded)) - config.collision_penalty * float(bool(collided))


def _view_radius(config: WorldConfig) -> float:
    half = config.frame_size / 2
    ahead = 0.75 * config.frame_size
    return (config.meters_per_pixel * math.hypot(ahead, half)
            + max(config.lane_half_width, config.barrier_offset) + 2.0)


def render_observation(state: WorldState) -> np.ndarray:
    """Top-down frame centred on the ego car, direction of travel up."""
    cfg = state.config
    route = state.route
    radius = _view_radius(cfg)
    near = np.hypot(route.xs - state.x, route.ys - state.y) < radius
    seg_mask = near[:-1] | near[1:]
    segments = route.segments[seg_mask]
    obstacles = state.obstacle_positions()
    if len(obstacles):
        keep = np.hypot(obstacles[:, 0] - state.x, obstacles[:, 1] - state.y) < radius + obstacles[:, 2]
        obstacles = obstacles[keep]
    scale = cfg.meters_per_pixel
    return kernels.render_frame(state.x, state.y, state.heading, scale, 0.75 * cfg.frame_size,
                                segments, obstacles, cfg.lane_half_width,
                                max(0.15, 0.75 * scale), PALETTE, barrier=cfg.barrier_offset,
                                frame_size=cfg.frame_size)


def reset(seed: int, config: WorldConfig | None = None) -> tuple[WorldState, np.ndarray]:
    config = config or WorldConfig()
    route = get_route(config.route_id, config.routes_file)
    rng = np.random.default_rng(seed)
    travel = config.max_steps * config.speed * config.dt
    lo = route.spawn_margin
    hi = route.length - route.spawn_margin - travel
    if hi < lo:
        raise ConfigError(f"route {route.name!r} ({route.length:.0f} m) too short for "
                          f"{config.max_steps} steps")
    s = float(rng.uniform(lo, hi))
    x, y = route.point_at(s)
    state = WorldState(config=config, route=route, x=x, y=y, heading=route.heading_at(s),
                       speed=config.speed, step=0, frames=np.empty(0, np.uint8), rng=rng,
                       spawn_s=s)
    _, _, state.lateral_offset = kernels.project_point(x, y, route.xs, route.ys)
    frame = render_observation(state)
    state.frames = np.repeat(frame[None], config.stack_length, axis=0)
    return state, state.frames


def _collides(state: WorldState) -> bool:
    cfg = state.config
    if cfg.barrier_offset and abs(state.lateral_offset) + cfg.vehicle_width / 2 >= cfg.barrier_offset:
        return True
    obstacles = state.obstacle_positions()
    if not len(obstacles):
        return False
    c, s = math.cos(state.heading), math.sin(state.heading)
    dx = obstacles[:, 0] - state.x
    dy = obstacles[:, 1] - state.y
    lx = np.abs(dx * c + dy * s) - cfg.vehicle_length / 2
    ly = np.abs(-dx * s + dy * c) - cfg.vehicle_width / 2
    gap = np.hypot(np.maximum(lx, 0.0), np.maximum(ly, 0.0))
    return bool(np.any(gap <= obstacles[:, 2]))


def step(state: WorldState, steering: float) -> tuple[WorldState, StepResult]:
    """Advance one tick in place. Steering is clipped to [-1, 1]."""
    if state.done:
        raise ProtocolError("episode is over; call reset()")
    steering = float(steering)
    if not math.isfinite(steering):
        raise ValueError(f"steering must be finite, got {steering}")
    steering = min(max(steering, -1.0), 1.0)
    cfg = state.config
    delta = steering * math.radians(cfg.max_steer_deg)
    v, dt = state.speed, cfg.dt
    state.x += v * math.cos(state.heading) * dt
    state.y += v * math.sin(state.heading) * dt
    state.heading += v / cfg.wheelbase * math.tan(delta) * dt
    state.step += 1

    _, _, state.lateral_offset = kernels.project_point(state.x, state.y, state.route.xs, state.route.ys)
    lane_invaded = abs(state.lateral_offset) > cfg.lane_half_width
    collided = _collides(state)
    reward = compute_reward(lane_invaded, collided, cfg)

    state.total_reward += reward
    state.lane_invasions += int(lane_invaded)
    state.collisions += int(collided)
    state.done = collided or state.step >= cfg.max_steps

    frame = render_observation(state)
    state.frames = np.concatenate([state.frames[1:], frame[None]], axis=0)
    info = {"lane_invaded": lane_invaded, "collided": collided, "step": state.step}
    return state, StepResult(state.frames, reward, state.done, info)


def stats_of(state: WorldState) -> EpisodeStats:
    return EpisodeStats(state.total_reward, state.step, state.lane_invasions, state.collisions)


TRACE_FIELDS = ["step", "x", "y", "heading", "steering", "reward", "lane_invaded", "collided"]


def rollout_episode(policy: Callable[[np.ndarray], float], seed: int,
                    config: WorldConfig | None = None, trace: list | None = None) -> EpisodeStats:
    state, obs = reset(seed, config)
    if trace is not None:
        trace.append({"step": 0, "x": state.x, "y": state.y, "heading": state.heading,
                      "steering": 0.0, "reward": 0.0, "lane_invaded": False, "collided": False})
    while not state.done:
        steering = float(policy(obs))
        state, result = step(state, steering)
        obs = result.observation
        if trace is not None:
            trace.append({"step": state.step, "x": state.x, "y": state.y,
                          "heading": state.heading, "steering": min(max(steering, -1.0), 1.0),
                          "reward": result.reward, "lane_invaded": result.info["lane_invaded"],
                          "collided": result.info["collided"]})
    return stats_of(state)


def write_trace_csv(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: (int(v) if isinstance(v, bool) else v) for k, v in row.items()})


def to_float(clip: np.ndarray) -> np.ndarray:
    """uint8 clip -> float32 in [0, 1]."""
    return clip.astype(np.float32) / 255.0
