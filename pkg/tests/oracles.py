"""Independent loop oracles: plain Python floats and the math module, no vectorisation."""
from __future__ import annotations

import math


def dot(a, b):
    s = 0.0
    for x, y in zip(a, b):
        s += x * y
    return s


def norm(a):
    return math.sqrt(dot(a, a))


def cosine(a, b):
    return dot(a, b) / (norm(a) * norm(b))


def info_nce(queries, positives, negatives, temperature):
    """``positives[i]`` / ``negatives[i]`` are lists of key vectors for query i."""
    total = 0.0
    for q, pos, neg in zip(queries, positives, negatives):
        num = 0.0
        for k in pos:
            num += math.exp(cosine(q, k) / temperature)
        den = num
        for k in neg:
            den += math.exp(cosine(q, k) / temperature)
        total += -math.log(num / den)
    return total / len(queries)


def byol(pred, target):
    total = 0.0
    for p, t in zip(pred, target):
        np_, nt = norm(p), norm(t)
        s = 0.0
        for x, y in zip(p, t):
            s += (x / np_ - y / nt) ** 2
        total += s
    return total / len(pred)


def flat(x):
    if isinstance(x, (list, tuple)):
        out = []
        for v in x:
            out += flat(v)
        return out
    return [x]


def vae(x, x_hat, mu, logvar, kl_weight):
    xs, hs = flat(x), flat(x_hat)
    recon = 0.0
    for a, b in zip(xs, hs):
        recon += (a - b) ** 2
    recon /= len(xs)
    kl = 0.0
    for m_row, l_row in zip(mu, logvar):
        for m, lv in zip(m_row, l_row):
            kl += 0.5 * (m * m + math.exp(lv) - 1.0 - lv)
    kl /= len(mu)
    return recon + kl_weight * kl, recon, kl


def value_loss(new, old, ret, vf_clip):
    total = 0.0
    for n, o, r in zip(new, old, ret):
        d = n - o
        if d > vf_clip:
            d = vf_clip
        if d < -vf_clip:
            d = -vf_clip
        total += max((n - r) ** 2, (o + d - r) ** 2)
    return total / len(new)


def ppo_surrogate(logp_new, logp_old, adv, eps):
    total = 0.0
    for ln, lo, a in zip(logp_new, logp_old, adv):
        r = math.exp(ln - lo)
        rc = min(max(r, 1.0 - eps), 1.0 + eps)
        total += min(r * a, rc * a)
    return -total / len(adv)


def gaussian_logp(action, mean, var):
    s = 0.0
    for a, m, v in zip(action, mean, var):
        s += -0.5 * math.log(2 * math.pi * v) - (a - m) ** 2 / (2 * v)
    return s


def gae_discounted(rewards, values, dones, gamma, lam):
    """Advantages as explicit forward sums of discounted TD errors, cut at episode ends."""
    n = len(rewards)
    deltas = [rewards[t] + gamma * values[t + 1] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        a, w = 0.0, 1.0
        for u in range(t, n):
            a += w * deltas[u]
            if dones[u]:
                break
            w *= gamma * lam
        adv.append(a)
    return adv


def median(xs):
    s = sorted(xs)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def trailing_mean(xs, window):
    out = []
    for i in range(len(xs)):
        lo = max(0, i - window + 1)
        tot = 0.0
        for j in range(lo, i + 1):
            tot += xs[j]
        out.append(tot / (i + 1 - lo))
    return out
