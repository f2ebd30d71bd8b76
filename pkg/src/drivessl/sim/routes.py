"""Road layouts: centreline polylines built from constant-curvature pieces."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ..config import parse_kv, read_kv
from ..errors import ConfigError

# polyline vertex spacing in metres
SAMPLE_SPACING = 1.0


@dataclass(frozen=True)
class Route:
    name: str
    xs: np.ndarray
    ys: np.ndarray
    arclen: np.ndarray
    # static or scripted discs: s, offset, radius, v_s, v_d
    obstacles: np.ndarray
    spawn_margin: float = 20.0

    @property
    def length(self) -> float:
        return float(self.arclen[-1])

    @property
    def segments(self) -> np.ndarray:
        return np.stack([self.xs[:-1], self.ys[:-1], self.xs[1:], self.ys[1:]], axis=1)

    def _locate(self, s: float) -> tuple[int, float]:
        s = min(max(s, 0.0), self.length)
        k = int(np.searchsorted(self.arclen, s, side="right")) - 1
        k = min(max(k, 0), len(self.xs) - 2)
        seg = self.arclen[k + 1] - self.arclen[k]
        return k, (s - self.arclen[k]) / seg

    def heading_at(self, s: float) -> float:
        k, _ = self._locate(s)
        return math.atan2(self.ys[k + 1] - self.ys[k], self.xs[k + 1] - self.xs[k])

    def point_at(self, s: float, offset: float = 0.0) -> tuple[float, float]:
        """World position at arc length ``s`` shifted ``offset`` metres to the left."""
        k, t = self._locate(s)
        dx = self.xs[k + 1] - self.xs[k]
        dy = self.ys[k + 1] - self.ys[k]
        x = self.xs[k] + t * dx
        y = self.ys[k] + t * dy
        if offset:
            norm = math.hypot(dx, dy)
            x -= offset * dy / norm
            y += offset * dx / norm
        return float(x), float(y)


def build_polyline(pieces, spacing=SAMPLE_SPACING):
    """Integrate ``(length, curvature)`` pieces into vertex arrays."""
    xs, ys = [0.0], [0.0]
    heading = 0.0
    for length, curvature in pieces:
        if length <= 0:
            raise ConfigError(f"route piece length must be positive, got {length}")
        n = max(1, int(round(length / spacing)))
        ds = length / n
        for _ in range(n):
            # chord direction of a constant-curvature arc is its mid heading
            mid = heading + 0.5 * curvature * ds
            xs.append(xs[-1] + ds * math.cos(mid))
            ys.append(ys[-1] + ds * math.sin(mid))
            heading += curvature * ds
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    arclen = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(xs), np.diff(ys)))])
    return xs, ys, arclen


def _parse_pieces(value: str, key: str):
    pieces = []
    for item in value.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected length:curvature, got {item!r}")
        pieces.append((float(parts[0]), float(parts[1])))
    return pieces


def _parse_obstacles(value: str, key: str) -> np.ndarray:
    rows = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        parts = [float(p) for p in item.split(":")]
        if len(parts) not in (3, 5):
            raise ConfigError(f"{key}: expected s:offset:radius[:v_s:v_d], got {item!r}")
        if parts[2] <= 0:
            raise ConfigError(f"{key}: obstacle radius must be positive")
        rows.append(parts + [0.0, 0.0] if len(parts) == 3 else parts)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def parse_routes(mapping: dict[str, str]) -> dict[str, Route]:
    names = sorted({key.rsplit(".", 1)[0] for key in mapping})
    routes = {}
    for name in names:
        known = {"segments", "obstacles", "spawn_margin"}
        for key in mapping:
            prefix, field = key.rsplit(".", 1)
            if prefix == name and field not in known:
                raise ConfigError(f"unknown route key {key!r}")
        seg_key = f"{name}.segments"
        if seg_key not in mapping:
            raise ConfigError(f"route {name!r} has no segments")
        xs, ys, arclen = build_polyline(_parse_pieces(mapping[seg_key], seg_key))
        obstacles = _parse_obstacles(mapping.get(f"{name}.obstacles", ""), f"{name}.obstacles")
        margin = float(mapping.get(f"{name}.spawn_margin", 20.0))
        routes[name] = Route(name, xs, ys, arclen, obstacles, margin)
    return routes


@lru_cache(maxsize=None)
def _builtin() -> dict[str, Route]:
    text = resources.files("drivessl").joinpath("data/routes.cfg").read_text()
    return parse_routes(parse_kv(text, "routes.cfg"))


@lru_cache(maxsize=16)
def _from_file(path: str) -> dict[str, Route]:
    return parse_routes(read_kv(path))


def builtin_route_names() -> list[str]:
    return sorted(_builtin())


def get_route(route_id: str, routes_file: str | None = None) -> Route:
    table = _from_file(str(Path(routes_file).resolve())) if routes_file else _builtin()
    try:
        return table[route_id]
    except KeyError:
        raise ConfigError(f"unknown route_id {route_id!r}; known: {sorted(table)}") from None
