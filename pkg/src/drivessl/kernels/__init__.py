"""Hot kernels with a compiled backend and a numpy fallback.

The backend is chosen once at import: the Cython extension ``_core`` when it
was built, otherwise ``_reference``. Set ``DRIVESSL_PURE_PYTHON=1`` to force the
fallback. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _reference

if os.environ.get("DRIVESSL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _reference
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _reference

BACKEND = "cython" if _impl is not _reference else "python"


def render_frame(ego_x, ego_y, heading, scale, ego_row, segments, obstacles,
                 half_width, line_half, palette, barrier=0.0, out=None, frame_size=None,
                 impl=None):
    """Rasterize one ego-centred top-down frame into ``out`` (uint8, 3 x H x W).

    ``palette`` rows are background, road, lane marking and obstacle colours.
    A positive ``barrier`` draws walls at that distance from the centreline.
    """
    impl = impl or _impl
    if out is None:
        out = np.empty((3, frame_size, frame_size), dtype=np.uint8)
    segments = np.ascontiguousarray(segments, dtype=np.float64).reshape(-1, 4)
    obstacles = np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3)
    palette = np.ascontiguousarray(palette, dtype=np.float64).reshape(4, 3)
    impl.render_frame(float(ego_x), float(ego_y), float(heading), float(scale), float(ego_row),
                      segments, obstacles, float(half_width), float(line_half), float(barrier),
                      palette, out)
    return out


def project_point(px, py, xs, ys, impl=None):
    """Closest point of a polyline to ``(px, py)``.

    Returns ``(segment_index, t, signed_offset)``; the offset is positive to the
    left of the direction of travel.
    """
    impl = impl or _impl
    k, t, off = impl.project_point(float(px), float(py),
                                   np.ascontiguousarray(xs, dtype=np.float64),
                                   np.ascontiguousarray(ys, dtype=np.float64))
    return int(k), float(t), float(off)


def gae(rewards, values, dones, gamma, lam, impl=None):
    """Backward GAE recursion; ``values`` carries the bootstrap value last."""
    impl = impl or _impl
    return impl.gae(np.ascontiguousarray(rewards, dtype=np.float64),
                    np.ascontiguousarray(values, dtype=np.float64),
                    np.ascontiguousarray(dones, dtype=np.float64),
                    float(gamma), float(lam))


__all__ = ["BACKEND", "render_frame", "project_point", "gae"]
