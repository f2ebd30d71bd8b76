# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: scene rasterization, polyline projection and GAE.

Every function here has a numpy twin in ``_reference.py``; both evaluate the
same floating point expressions in the same order so outputs agree exactly.
"""
import numpy as np

from libc.math cimport sqrt, cos, sin, fabs, floor, INFINITY


cdef inline double _clip01(double v) noexcept nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


cdef inline double _seg_dist2(double px, double py, double ax, double ay,
                              double bx, double by) noexcept nogil:
    cdef double dx = bx - ax
    cdef double dy = by - ay
    cdef double l2 = dx * dx + dy * dy
    cdef double t = 0.0
    if l2 > 0.0:
        t = ((px - ax) * dx + (py - ay) * dy) / l2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    cdef double ex = ax + t * dx - px
    cdef double ey = ay + t * dy - py
    return ex * ex + ey * ey


def render_frame(double ego_x, double ego_y, double heading, double scale,
                 double ego_row, const double[:, ::1] segments,
                 const double[:, ::1] obstacles, double half_width,
                 double line_half, double barrier, const double[:, ::1] palette,
                 unsigned char[:, :, ::1] out):
    cdef Py_ssize_t H = out.shape[1]
    cdef Py_ssize_t W = out.shape[2]
    cdef Py_ssize_t nseg = segments.shape[0]
    cdef Py_ssize_t nobs = obstacles.shape[0]
    cdef double c = cos(heading)
    cdef double s = sin(heading)
    cdef Py_ssize_t r, col, k, ch
    cdef double fwd, left, wx, wy, best, d2, dist, a, dox, doy
    cdef double v[3]
    # Segments farther than `reach` from a pixel cannot tint it, so each row
    # only scans the segments whose bounding circle comes near that row.
    cdef double reach = (barrier if barrier > half_width else half_width) + line_half + scale
    cdef double mx, my, rad, r0x, r0y, r1x, r1y
    cdef Py_ssize_t nrow
    cand_arr = np.empty(max(nseg, 1), dtype=np.intp)
    cdef Py_ssize_t[::1] cand = cand_arr
    with nogil:
        for r in range(H):
            fwd = (ego_row - (r + 0.5)) * scale
            left = (0.5 * W - 0.5) * scale
            r0x = ego_x + fwd * c - left * s
            r0y = ego_y + fwd * s + left * c
            left = (0.5 * W - (W - 0.5)) * scale
            r1x = ego_x + fwd * c - left * s
            r1y = ego_y + fwd * s + left * c
            nrow = 0
            for k in range(nseg):
                mx = 0.5 * (segments[k, 0] + segments[k, 2])
                my = 0.5 * (segments[k, 1] + segments[k, 3])
                rad = 0.5 * sqrt((segments[k, 2] - segments[k, 0]) ** 2
                                 + (segments[k, 3] - segments[k, 1]) ** 2) + reach
                if _seg_dist2(mx, my, r0x, r0y, r1x, r1y) <= rad * rad:
                    cand[nrow] = k
                    nrow += 1
            for col in range(W):
                left = (0.5 * W - (col + 0.5)) * scale
                wx = ego_x + fwd * c - left * s
                wy = ego_y + fwd * s + left * c
                best = INFINITY
                for k in range(nrow):
                    d2 = _seg_dist2(wx, wy, segments[cand[k], 0], segments[cand[k], 1],
                                    segments[cand[k], 2], segments[cand[k], 3])
                    if d2 < best:
                        best = d2
                dist = sqrt(best)
                for ch in range(3):
                    v[ch] = palette[0, ch]
                a = _clip01((half_width - dist) / scale + 0.5)
                for ch in range(3):
                    v[ch] = v[ch] * (1.0 - a) + palette[1, ch] * a
                a = _clip01((line_half - fabs(dist - half_width)) / scale + 0.5)
                for ch in range(3):
                    v[ch] = v[ch] * (1.0 - a) + palette[2, ch] * a
                if barrier > 0.0:
                    a = _clip01((line_half - fabs(dist - barrier)) / scale + 0.5)
                    for ch in range(3):
                        v[ch] = v[ch] * (1.0 - a) + palette[3, ch] * a
                for k in range(nobs):
                    dox = wx - obstacles[k, 0]
                    doy = wy - obstacles[k, 1]
                    a = _clip01((obstacles[k, 2] - sqrt(dox * dox + doy * doy)) / scale + 0.5)
                    for ch in range(3):
                        v[ch] = v[ch] * (1.0 - a) + palette[3, ch] * a
                for ch in range(3):
                    out[ch, r, col] = <unsigned char>floor(v[ch] + 0.5)
    return np.asarray(out)


def project_point(double px, double py, const double[::1] xs, const double[::1] ys):
    """Closest point on the polyline: (segment index, t, signed offset)."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t k, best_k = 0
    cdef double best = INFINITY, d2, dx, dy, l2, t, best_t = 0.0, ex, ey
    for k in range(n - 1):
        dx = xs[k + 1] - xs[k]
        dy = ys[k + 1] - ys[k]
        l2 = dx * dx + dy * dy
        t = 0.0
        if l2 > 0.0:
            t = ((px - xs[k]) * dx + (py - ys[k]) * dy) / l2
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
        ex = xs[k] + t * dx - px
        ey = ys[k] + t * dy - py
        d2 = ex * ex + ey * ey
        if d2 < best:
            best = d2
            best_k = k
            best_t = t
    dx = xs[best_k + 1] - xs[best_k]
    dy = ys[best_k + 1] - ys[best_k]
    l2 = sqrt(dx * dx + dy * dy)
    # cross(direction, p - a) / |direction|: positive to the left
    cdef double offset = (dx * (py - ys[best_k]) - dy * (px - xs[best_k])) / l2
    return best_k, best_t, offset


def gae(const double[::1] rewards, const double[::1] values,
        const double[::1] dones, double gamma, double lam):
    cdef Py_ssize_t n = rewards.shape[0]
    if values.shape[0] != n + 1 or dones.shape[0] != n:
        raise ValueError("gae expects len(values) == len(rewards) + 1 == len(dones) + 1")
    adv_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] adv = adv_arr
    cdef double last = 0.0, nonterminal, delta
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv_arr
