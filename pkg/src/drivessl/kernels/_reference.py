"""Numpy implementations of the compiled kernels.

Used when the Cython extension is unavailable (or forced through
``DRIVESSL_PURE_PYTHON=1``). The arithmetic mirrors ``_core.pyx`` operation for
operation, so both backends produce identical bytes.
"""
import numpy as np


def _clip01(v):
    return np.clip(v, 0.0, 1.0)


def render_frame(ego_x, ego_y, heading, scale, ego_row, segments, obstacles,
                 half_width, line_half, barrier, palette, out):
    _, H, W = out.shape
    c = np.cos(heading)
    s = np.sin(heading)
    fwd = ((ego_row - (np.arange(H) + 0.5)) * scale)[:, None]
    left = ((0.5 * W - (np.arange(W) + 0.5)) * scale)[None, :]
    wx = ego_x + fwd * c - left * s
    wy = ego_y + fwd * s + left * c

    if len(segments):
        ax, ay, bx, by = (segments[:, i][:, None, None] for i in range(4))
        dx = bx - ax
        dy = by - ay
        l2 = dx * dx + dy * dy
        safe = np.where(l2 > 0.0, l2, 1.0)
        t = np.where(l2 > 0.0, np.clip(((wx - ax) * dx + (wy - ay) * dy) / safe, 0.0, 1.0), 0.0)
        ex = ax + t * dx - wx
        ey = ay + t * dy - wy
        dist = np.sqrt((ex * ex + ey * ey).min(axis=0))
    else:
        dist = np.full((H, W), np.inf)

    v = np.broadcast_to(palette[0][:, None, None], (3, H, W)).astype(np.float64)
    a = _clip01((half_width - dist) / scale + 0.5)
    v = v * (1.0 - a) + palette[1][:, None, None] * a
    a = _clip01((line_half - np.abs(dist - half_width)) / scale + 0.5)
    v = v * (1.0 - a) + palette[2][:, None, None] * a
    if barrier > 0.0:
        a = _clip01((line_half - np.abs(dist - barrier)) / scale + 0.5)
        v = v * (1.0 - a) + palette[3][:, None, None] * a
    for ox, oy, orad in obstacles:
        dox = wx - ox
        doy = wy - oy
        a = _clip01((orad - np.sqrt(dox * dox + doy * doy)) / scale + 0.5)
        v = v * (1.0 - a) + palette[3][:, None, None] * a
    out[...] = np.floor(v + 0.5).astype(np.uint8)
    return out


def project_point(px, py, xs, ys):
    dx = xs[1:] - xs[:-1]
    dy = ys[1:] - ys[:-1]
    l2 = dx * dx + dy * dy
    safe = np.where(l2 > 0.0, l2, 1.0)
    t = np.where(l2 > 0.0, np.clip(((px - xs[:-1]) * dx + (py - ys[:-1]) * dy) / safe, 0.0, 1.0), 0.0)
    ex = xs[:-1] + t * dx - px
    ey = ys[:-1] + t * dy - py
    k = int(np.argmin(ex * ex + ey * ey))
    length = np.sqrt(dx[k] * dx[k] + dy[k] * dy[k])
    offset = (dx[k] * (py - ys[k]) - dy[k] * (px - xs[k])) / length
    return k, float(t[k]), float(offset)


def gae(rewards, values, dones, gamma, lam):
    n = len(rewards)
    if len(values) != n + 1 or len(dones) != n:
        raise ValueError("gae expects len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = np.zeros(n, dtype=np.float64)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv
