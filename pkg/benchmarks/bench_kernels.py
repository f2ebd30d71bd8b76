"""Compiled vs numpy kernels: frame rendering, polyline projection and GAE.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--frame-size 64]
"""
import argparse
import timeit

import numpy as np

from drivessl import kernels, sim
from drivessl.kernels import _reference
from drivessl.sim.world import PALETTE, _view_radius

try:
    from drivessl.kernels import _core
except ImportError:
    _core = None


def render_args(frame_size: int):
    cfg = sim.WorldConfig(route_id="obstacle-course", frame_size=frame_size)
    state, _ = sim.reset(0, cfg)
    for _ in range(30):
        state, _ = sim.step(state, 0.05)
    route = state.route
    near = np.hypot(route.xs - state.x, route.ys - state.y) < _view_radius(cfg)
    scale = cfg.meters_per_pixel
    return dict(ego_x=state.x, ego_y=state.y, heading=state.heading, scale=scale,
                ego_row=0.75 * frame_size, segments=route.segments[near[:-1] | near[1:]],
                obstacles=state.obstacle_positions(), half_width=cfg.lane_half_width,
                line_half=max(0.15, 0.75 * scale), palette=PALETTE, barrier=cfg.barrier_offset,
                out=np.empty((3, frame_size, frame_size), np.uint8)), route


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--frame-size", type=int, default=64)
    args = p.parse_args()

    impls = {"python": _reference}
    if _core is not None:
        impls["cython"] = _core
    else:
        print("compiled extension not built; timing the fallback only")
    kw, route = render_args(args.frame_size)
    rng = np.random.default_rng(0)
    n = 640
    rewards, values, dones = rng.normal(size=n), rng.normal(size=n + 1), (rng.random(n) < 0.01) * 1.0

    cases = {
        f"render {args.frame_size}px": (lambda impl: kernels.render_frame(**kw, impl=impl), 20),
        "project_point": (lambda impl: kernels.project_point(kw["ego_x"] + 0.3, kw["ego_y"], route.xs,
                                                             route.ys, impl=impl), 2000),
        f"gae n={n}": (lambda impl: kernels.gae(rewards, values, dones, 0.9, 0.95, impl=impl), 200),
    }
    print(f"{'kernel':<16}" + "".join(f"{name:>14}" for name in impls) + f"{'speedup':>10}")
    for label, (fn, number) in cases.items():
        times = {}
        for name, impl in impls.items():
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat))
            times[name] = best / number
        row = f"{label:<16}" + "".join(f"{times[n] * 1e6:>11.1f} us" for n in impls)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
