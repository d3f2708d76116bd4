"""Scalar-loop reference implementations used as test oracles.

These are written independently of the vectorised package code: plain loops over
grid cells, no numpy indexing tricks.
"""

import math


def filter_value(ox, oy, sx, sy):
    return math.exp(-(ox * ox) / (2 * sx * sx) - (oy * oy) / (2 * sy * sy)) / (2 * math.pi * sx * sy)


def seq_errors(q_push, q_next, action, reward, sx, sy, kx, ky, gamma, kappa, directions):
    """Per-entry TD error dict {(y, x, a): error} for the spatially extended update."""
    h, w, k = len(q_push), len(q_push[0]), len(q_push[0][0])
    x0, y0, th = action
    best_next = max(q_next[y][x][a] for y in range(h) for x in range(w) for a in range(k))
    boot = gamma * best_next if reward > 0 else 0.0
    dx, dy = directions[th]
    ang = math.atan2(dy, dx)
    out = {}
    for gy in range(h):
        for gx in range(w):
            # Every push-frame offset whose rotation lands on this cell.
            hits = []
            for ox in range(-kx, 1):
                for oy in range(-ky, ky + 1):
                    rx = x0 + int(round(ox * math.cos(ang) - oy * math.sin(ang)))
                    ry = y0 + int(round(ox * math.sin(ang) + oy * math.cos(ang)))
                    if (rx, ry) == (gx, gy):
                        hits.append(filter_value(ox, oy, sx, sy))
            if not hits:
                continue
            y_val = reward * max(hits) + boot
            for a, scale in (((th - 1) % k, kappa), (th, 1.0), ((th + 1) % k, kappa)):
                out[(gy, gx, a)] = q_push[gy][gx][a] - scale * y_val
    return out


def cross_entropy(q, label):
    flat = [v for row in q for cell in row for v in cell]
    m = max(flat)
    log_z = m + math.log(sum(math.exp(v - m) for v in flat))
    x, y, th = label
    return log_z - q[y][x][th]
