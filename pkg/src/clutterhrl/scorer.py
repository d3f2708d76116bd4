"""Dense per-cell Q scorers with exact analytic gradients.

Every scorer runs two per-cell sub-streams over a square patch of the observation: a
colour stream (top colour, fixtures, plus broadcast held-colour and goal-stage
context) and a height stream (scaled height, in-grid mask). Each stream is one affine
layer with a rectifier; the two are fused by concatenation. Weights are shared
across cells, so the dense heads are translation-equivariant away from the border.

:class:`DualScorer` adds a per-cell push head (one output per push direction) and a
two-way high-level head over mean- and max-pooled features. :class:`PickPlaceScorer` holds two independent
trunks with one-output pick and place heads.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import GREY, GridObservation, HighAction, Rng
from .tasks import GOAL_IDS, N_COLORS, N_FIXTURE_IDS

MAGIC = b"CHRLCKPT"
VERSION = 1


@dataclass(frozen=True)
class ScorerConfig:
    patch: int = 5
    hidden: int = 32
    head_init_scale: float = 1.0
    k_push: int = 8
    k_pick: int = 1
    k_place: int = 1
    n_colors: int = N_COLORS
    n_fixture_ids: int = N_FIXTURE_IDS
    max_stack: int = 4
    stage_bins: int = 8

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError("patch must be a positive odd number")
        if self.k_pick != 1:
            raise ValueError("k_pick must be 1")
        if self.hidden < 1 or self.k_push < 1 or self.k_place < 1:
            raise ValueError("hidden, k_push and k_place must be positive")

    @property
    def color_channels(self) -> int:
        return self.n_colors + self.n_fixture_ids - 1

    @property
    def color_dim(self) -> int:
        return self.patch * self.patch * self.color_channels + self.n_colors + self.stage_bins

    @property
    def height_dim(self) -> int:
        return self.patch * self.patch * 2


def _patches(grid: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W, patch*patch*C) with zero padding."""
    r = patch // 2
    b, h, w, c = grid.shape
    padded = np.pad(grid, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(padded, (patch, patch), axis=(1, 2))  # (B, H, W, C, p, p)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, h * w, patch * patch * c)


def features(obs: Sequence[GridObservation], cfg: ScorerConfig):
    """Colour-stream and height-stream inputs for a batch of observations."""
    heights = np.stack([o.heights for o in obs]).astype(np.float64)
    top = np.stack([o.top_color for o in obs])
    fix = np.stack([o.fixtures for o in obs])
    b, h, w = heights.shape
    if top.max(initial=0) >= cfg.n_colors or fix.max(initial=0) >= cfg.n_fixture_ids:
        raise ValueError("colour or fixture id outside the scorer's vocabulary")

    eye_c = np.eye(cfg.n_colors)
    eye_f = np.eye(cfg.n_fixture_ids)[:, 1:]
    color_grid = np.concatenate([eye_c[top], eye_f[fix]], axis=-1)
    xc_local = _patches(color_grid, cfg.patch)

    held = np.zeros((b, cfg.n_colors))
    for i, o in enumerate(obs):
        if o.held is not None:
            held[i, o.held] = 1.0
    # Blocks standing on goal cells, ignoring cells topped by grey clutter.
    goal = np.isin(fix, GOAL_IDS) & (top > GREY)
    stage = np.minimum((heights * goal).sum(axis=(1, 2)).astype(int), cfg.stage_bins - 1)
    context = np.concatenate([held, np.eye(cfg.stage_bins)[stage]], axis=-1)
    xc = np.concatenate([xc_local, np.broadcast_to(context[:, None, :], (b, h * w, context.shape[1]))], axis=-1)

    height_grid = np.stack([heights / cfg.max_stack, np.ones_like(heights)], axis=-1)
    xh = _patches(height_grid, cfg.patch)
    return xc, xh


def _uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _trunk_params(prefix: str, cfg: ScorerConfig, rng: Optional[Rng]) -> dict:
    hid = cfg.hidden
    shapes = {"Wc": (cfg.color_dim, hid), "Wh": (cfg.height_dim, hid)}
    p = {}
    for name, shape in shapes.items():
        p[prefix + name] = np.zeros(shape) if rng is None else _uniform(rng, shape[0], shape)
    p[prefix + "bc"] = np.zeros(hid)
    p[prefix + "bh"] = np.zeros(hid)
    return p


def _head_params(name: str, n_in: int, n_out: int, rng: Optional[Rng], scale: float = 1.0) -> dict:
    w = np.zeros((n_in, n_out)) if rng is None else scale * _uniform(rng, n_in, (n_in, n_out))
    return {name + "W": w, name + "b": np.zeros(n_out)}


def _trunk_forward(p: dict, prefix: str, xc: np.ndarray, xh: np.ndarray):
    zc = xc @ p[prefix + "Wc"] + p[prefix + "bc"]
    zh = xh @ p[prefix + "Wh"] + p[prefix + "bh"]
    feat = np.concatenate([np.maximum(zc, 0.0), np.maximum(zh, 0.0)], axis=-1)
    return feat, (xc, xh, zc, zh)


def _trunk_backward(p: dict, prefix: str, cache, dfeat: np.ndarray, grads: dict) -> None:
    xc, xh, zc, zh = cache
    hid = zc.shape[-1]
    dzc = dfeat[..., :hid] * (zc > 0)
    dzh = dfeat[..., hid:] * (zh > 0)
    grads[prefix + "Wc"] += xc.reshape(-1, xc.shape[-1]).T @ dzc.reshape(-1, hid)
    grads[prefix + "bc"] += dzc.sum(axis=(0, 1))
    grads[prefix + "Wh"] += xh.reshape(-1, xh.shape[-1]).T @ dzh.reshape(-1, hid)
    grads[prefix + "bh"] += dzh.sum(axis=(0, 1))


class _Params:
    kind = ""

    def __init__(self, cfg: ScorerConfig, params: dict, frozen: bool = False):
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.frozen = frozen

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self, frozen: Optional[bool] = None):
        return type(self)(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.frozen if frozen is None else frozen)

    def freeze(self):
        return self.copy(frozen=True)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class DualScorer(_Params):
    """Shared two-stream trunk with a dense push head and a pooled high-level head."""

    kind = "dual"

    @classmethod
    def init(cls, cfg: ScorerConfig, rng: Optional[Rng] = None) -> "DualScorer":
        """Uniform +-1/sqrt(fan_in) weights and zero biases; all zeros when ``rng`` is None."""
        p = _trunk_params("", cfg, rng)
        p.update(_head_params("push_", 2 * cfg.hidden, cfg.k_push, rng, cfg.head_init_scale))
        p.update(_head_params("high_", 4 * cfg.hidden, 2, rng, cfg.head_init_scale))
        return cls(cfg, p)

    def forward_batch(self, obs: Sequence[GridObservation]):
        h, w = obs[0].height, obs[0].width
        if any((o.height, o.width) != (h, w) for o in obs):
            raise ValueError("batch mixes grid sizes")
        if min(h, w) < self.cfg.patch:
            raise ValueError("grid smaller than the scorer patch")
        xc, xh = features(obs, self.cfg)
        p = self.params
        feat, tcache = _trunk_forward(p, "", xc, xh)
        q_push = feat @ p["push_W"] + p["push_b"]
        # Max pooling lets a single cell (e.g. an exposed target) drive the high level.
        arg = feat.argmax(axis=1)
        pooled = np.concatenate([feat.mean(axis=1), np.take_along_axis(feat, arg[:, None, :], axis=1)[:, 0]], axis=-1)
        q_high = pooled @ p["high_W"] + p["high_b"]
        b = len(obs)
        return q_push.reshape(b, h, w, self.cfg.k_push), q_high, (tcache, feat, pooled, arg)

    def backward_batch(self, cache, dq_push: Optional[np.ndarray], dq_high: Optional[np.ndarray]) -> dict:
        tcache, feat, pooled, arg = cache
        p = self.params
        b, n, _ = feat.shape
        grads = self.zeros_like()
        dfeat = np.zeros_like(feat)
        if dq_push is not None:
            dqp = np.asarray(dq_push, dtype=np.float64).reshape(b, n, self.cfg.k_push)
            grads["push_W"] += feat.reshape(b * n, -1).T @ dqp.reshape(b * n, -1)
            grads["push_b"] += dqp.sum(axis=(0, 1))
            dfeat += dqp @ p["push_W"].T
        if dq_high is not None:
            dqh = np.asarray(dq_high, dtype=np.float64).reshape(b, 2)
            grads["high_W"] += pooled.T @ dqh
            grads["high_b"] += dqh.sum(axis=0)
            dpool = dqh @ p["high_W"].T
            m = feat.shape[-1]
            dfeat += dpool[:, None, :m] / n
            np.put_along_axis(dfeat, arg[:, None, :], np.take_along_axis(dfeat, arg[:, None, :], axis=1) + dpool[:, None, m:], axis=1)
        _trunk_backward(p, "", tcache, dfeat, grads)
        return grads


class PickPlaceScorer(_Params):
    """Independent pick and place trunks; the place map reads the held colour."""

    kind = "pickplace"

    @classmethod
    def init(cls, cfg: ScorerConfig, rng: Optional[Rng] = None) -> "PickPlaceScorer":
        p = _trunk_params("pick.", cfg, rng)
        p.update(_head_params("pick.q", 2 * cfg.hidden, cfg.k_pick, rng))
        p.update(_trunk_params("place.", cfg, rng))
        p.update(_head_params("place.q", 2 * cfg.hidden, cfg.k_place, rng))
        return cls(cfg, p)

    def forward_batch(self, head: str, obs: Sequence[GridObservation]):
        if head not in ("pick", "place"):
            raise ValueError(f"unknown head {head!r}")
        h, w = obs[0].height, obs[0].width
        if any((o.height, o.width) != (h, w) for o in obs):
            raise ValueError("batch mixes grid sizes")
        xc, xh = features(obs, self.cfg)
        p = self.params
        feat, tcache = _trunk_forward(p, head + ".", xc, xh)
        q = feat @ p[head + ".qW"] + p[head + ".qb"]
        return q.reshape(len(obs), h, w, -1), (head, tcache, feat)

    def backward_batch(self, cache, dq: np.ndarray) -> dict:
        head, tcache, feat = cache
        p = self.params
        b, n, _ = feat.shape
        grads = self.zeros_like()
        dq = np.asarray(dq, dtype=np.float64).reshape(b, n, -1)
        grads[head + ".qW"] += feat.reshape(b * n, -1).T @ dq.reshape(b * n, -1)
        grads[head + ".qb"] += dq.sum(axis=(0, 1))
        _trunk_backward(p, head + ".", tcache, dq @ p[head + ".qW"].T, grads)
        return grads


def forward_dual(scorer: DualScorer, obs: GridObservation):
    q_push, q_high, _ = scorer.forward_batch([obs])
    return q_push[0], q_high[0]


def backward(scorer, obs: GridObservation, upstream, head: Optional[str] = None) -> dict:
    """Parameter gradient of the scorer outputs on ``obs`` contracted with ``upstream``.

    For a :class:`DualScorer`, ``upstream`` is ``(dq_push, dq_high)`` (either may be
    None); for a :class:`PickPlaceScorer` it is the map gradient for ``head``.
    """
    if isinstance(scorer, DualScorer):
        dq_push, dq_high = upstream
        q_push, q_high, cache = scorer.forward_batch([obs])
        if dq_push is not None and np.shape(dq_push) != q_push.shape[1:]:
            raise ValueError(f"push upstream shape {np.shape(dq_push)} != {q_push.shape[1:]}")
        if dq_high is not None and np.shape(dq_high) != (2,):
            raise ValueError("high upstream must have shape (2,)")
        return scorer.backward_batch(
            cache,
            None if dq_push is None else np.asarray(dq_push)[None],
            None if dq_high is None else np.asarray(dq_high)[None],
        )
    q, cache = scorer.forward_batch(head, [obs])
    if np.shape(upstream) != q.shape[1:]:
        raise ValueError(f"upstream shape {np.shape(upstream)} != {q.shape[1:]}")
    return scorer.backward_batch(cache, np.asarray(upstream)[None])


def select_push(q_push: np.ndarray) -> tuple[int, int, int]:
    """Argmax (x, y, theta) of a (H, W, k) map; ties go to the smallest (theta, y, x)."""
    q = np.asarray(q_push)
    if q.size == 0:
        raise ValueError("empty Q map")
    flat = int(np.argmax(q.transpose(2, 0, 1)))
    th, y, x = np.unravel_index(flat, (q.shape[2], q.shape[0], q.shape[1]))
    return int(x), int(y), int(th)


select_cell = select_push


def select_high(q_high: np.ndarray) -> HighAction:
    """Argmax over (push, pick&place); a tie prefers pick&place."""
    return HighAction.PUSH if q_high[HighAction.PUSH] > q_high[HighAction.PICKPLACE] else HighAction.PICKPLACE


def sgd_step(scorer, grad: dict, lr: float):
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if scorer.frozen:
        raise RuntimeError("cannot update a frozen scorer")
    for name, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    new = scorer.copy()
    for name, g in grad.items():
        new.params[name] -= lr * g
    return new


class SGD:
    """Plain gradient descent with the same interface as :class:`Adam`."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr

    def step(self, scorer, grad: dict):
        return sgd_step(scorer, grad, self.lr)


class Adam:
    """Adam optimiser state for one scorer; :meth:`step` returns an updated copy."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, scorer, grad: dict):
        if scorer.frozen:
            raise RuntimeError("cannot update a frozen scorer")
        for name, g in grad.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        new = scorer.copy()
        for name, g in grad.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            new.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return new


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimiser {name!r}")


def grad_norm(grad: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grad.values())))


def clip_grad(grad: dict, max_norm: float) -> dict:
    n = grad_norm(grad)
    if n <= max_norm or n == 0.0:
        return grad
    s = max_norm / n
    return {k: v * s for k, v in grad.items()}


def save_checkpoint(scorer, path, extra: Optional[dict] = None) -> None:
    """Magic, version, JSON header (kind, config, extra), named little-endian float64
    tensors, trailing SHA-256 of everything before it."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    header = json.dumps(
        {"kind": scorer.kind, "config": asdict(scorer.cfg), "frozen": scorer.frozen, "extra": extra or {}},
        sort_keys=True,
    ).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = sorted(scorer.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(scorer.params[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path):
    """Returns ``(scorer, extra)``."""
    data = open(path, "rb").read()
    body, digest = data[:-32], data[-32:]
    if len(data) < len(MAGIC) + 32 or body[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a scorer checkpoint")
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<H", body, off)
    off += 2
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    cls = {"dual": DualScorer, "pickplace": PickPlaceScorer}[header["kind"]]
    return cls(ScorerConfig(**header["config"]), params, header["frozen"]), header["extra"]
