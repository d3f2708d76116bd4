"""Reward, TD targets, update gating and losses used during training.

All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .core import HighAction
from .sim import NEIGHBORS8

PUSH_WEIGHT = 0.75
PICKPLACE_WEIGHT = 1.0


@dataclass(frozen=True)
class SeqConfig:
    sigma_x: float = 1.5
    sigma_y: float = 0.75
    k_x: int = 3
    k_y: int = 1
    gamma: float = 0.9
    kappa: float = 0.5

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("sigma_x and sigma_y must be positive")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.k_x < 0 or self.k_y < 0:
            raise ValueError("region extents must be non-negative")


@dataclass(frozen=True)
class TsusConfig:
    tau: int = 100
    gamma: float = 0.9

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def stp_reward(high: HighAction, progress_delta: float, push_success: bool, pickplace_success: bool) -> float:
    """Progress regressions are passed through as the (negative) reward; otherwise a
    successful primitive earns its weight and a failed one earns nothing."""
    if progress_delta < 0:
        return float(progress_delta)
    if high == HighAction.PUSH:
        return PUSH_WEIGHT if push_success else 0.0
    return PICKPLACE_WEIGHT if pickplace_success else 0.0


def gaussian_filter(cfg: SeqConfig) -> dict:
    """Unnormalised anisotropic Gaussian over push-frame offsets
    ``-k_x <= x <= 0`` (behind the push start) and ``|y| <= k_y``."""
    norm = 1.0 / (2.0 * math.pi * cfg.sigma_x * cfg.sigma_y)
    return {
        (x, y): norm * math.exp(-(x * x) / (2 * cfg.sigma_x**2) - (y * y) / (2 * cfg.sigma_y**2))
        for x in range(-cfg.k_x, 1)
        for y in range(-cfg.k_y, cfg.k_y + 1)
    }


def _eta(reward: float) -> float:
    return 1.0 if reward > 0 else 0.0


def seq_target(cfg: SeqConfig, reward: float, q_next_push: np.ndarray) -> dict:
    """Region target: reward times the filter plus the discounted next-state maximum,
    the latter only when the reward is positive."""
    eta = _eta(reward)
    boot = cfg.gamma * eta * float(np.max(q_next_push)) if eta else 0.0
    return {off: reward * f + boot for off, f in gaussian_filter(cfg).items()}


def region_cells(cfg: SeqConfig, x: int, y: int, theta: int, width: int, height: int, directions: Sequence = NEIGHBORS8) -> dict:
    """Map each in-grid cell covered by the rotated region to its push-frame offset.

    Offsets are rotated by the push direction's angle and rounded to the nearest
    cell. When two offsets land on one cell the one with the larger filter value
    wins (first in iteration order on ties).
    """
    dx, dy = directions[theta]
    phi = math.atan2(dy, dx)
    c, s = math.cos(phi), math.sin(phi)
    filt = gaussian_filter(cfg)
    out: dict = {}
    for (ox, oy), f in filt.items():
        gx = x + int(round(ox * c - oy * s))
        gy = y + int(round(ox * s + oy * c))
        if not (0 <= gx < width and 0 <= gy < height):
            continue
        prev = out.get((gx, gy))
        if prev is None or f > filt[prev]:
            out[(gx, gy)] = (ox, oy)
    return out


def seq_td_error(cfg: SeqConfig, target: dict, q_push: np.ndarray, action, directions: Sequence = NEIGHBORS8):
    """TD error over the rotated region on the taken angle and its two cyclic neighbours.

    Returns ``(error, mask)``, both shaped like ``q_push`` (H, W, k). The neighbouring
    angles are regressed towards ``kappa`` times the region target; every entry
    outside the mask is exactly zero.
    """
    x, y, th = action
    h, w, k = q_push.shape
    err = np.zeros_like(q_push, dtype=np.float64)
    mask = np.zeros(q_push.shape, dtype=bool)
    cells = region_cells(cfg, x, y, th, w, h, directions)
    if not cells:
        return err, mask
    gx = np.array([c[0] for c in cells])
    gy = np.array([c[1] for c in cells])
    tgt = np.array([target[off] for off in cells.values()])
    for a, scale in (((th - 1) % k, cfg.kappa), (th, 1.0), ((th + 1) % k, cfg.kappa)):
        err[gy, gx, a] = q_push[gy, gx, a] - scale * tgt
        mask[gy, gx, a] = True
    return err, mask


def single_td_error(cfg: SeqConfig, reward: float, q_next_push: np.ndarray, q_push: np.ndarray, action):
    """Plain one-pixel, one-angle TD error (the update SEQ replaces)."""
    x, y, th = action
    boot = cfg.gamma * float(np.max(q_next_push)) if _eta(reward) else 0.0
    err = np.zeros_like(q_push, dtype=np.float64)
    mask = np.zeros(q_push.shape, dtype=bool)
    err[y, x, th] = q_push[y, x, th] - (reward + boot)
    mask[y, x, th] = True
    return err, mask


def tsus_target(cfg: TsusConfig, reward: float, q_next_high: np.ndarray) -> float:
    eta = _eta(reward)
    return float(reward) + (cfg.gamma * eta * float(np.max(q_next_high)) if eta else 0.0)


def tsus_gate(cfg: TsusConfig, high: HighAction, reward: float, exploratory: bool, epoch: int) -> int:
    """Whether a transition may update the high-level value.

    Pick&place always does. A push does when it was rewarded; from epoch ``tau`` on, a
    greedy (non-random) push does regardless of reward.
    """
    if high == HighAction.PICKPLACE:
        return 1
    rewarded = reward > 0
    if epoch < cfg.tau:
        return int(rewarded)
    return int(rewarded or not exploratory)


def huber(error, delta: float = 1.0):
    """Elementwise Huber loss and its derivative."""
    e = np.asarray(error, dtype=np.float64)
    a = np.abs(e)
    loss = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return loss, np.clip(e, -delta, delta)


def bc_loss(q_map: np.ndarray, expert) -> tuple[float, np.ndarray]:
    """Cross-entropy of the flattened softmax over every (y, x, theta) entry against
    the one-hot expert label, with its gradient on ``q_map``."""
    x, y, th = expert
    q = np.asarray(q_map, dtype=np.float64)
    loss = float(logsumexp(q) - q[y, x, th])
    grad = softmax(q.ravel()).reshape(q.shape)
    grad[y, x, th] -= 1.0
    return loss, grad
