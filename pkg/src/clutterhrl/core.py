"""Shared domain types: observations, two-part actions, transitions, and seeded RNG streams."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple

import numpy as np

EMPTY = 0
GREY = 1

Cell = Tuple[int, int]
LowAction = Tuple[int, int, int]  # (x, y, theta)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    arr.setflags(write=False)
    return arr


class HighAction(enum.IntEnum):
    """High-level primitive choice. Index order matches the high-level Q vector."""

    PUSH = 0
    PICKPLACE = 1


@dataclass(frozen=True, eq=False)
class GridObservation:
    """Top-down view of the tabletop.

    ``heights`` is the stack height per cell (depth analog), ``top_color`` the id of
    the topmost block (0 where empty), ``fixtures`` the static fixture id per cell and
    ``held`` the color of a block in the gripper, if any. Arrays are indexed ``[y, x]``.
    """

    heights: np.ndarray
    top_color: np.ndarray
    fixtures: np.ndarray
    held: Optional[int] = None

    def __post_init__(self):
        h, tc, fx = (_frozen(a) for a in (self.heights, self.top_color, self.fixtures))
        if not (h.shape == tc.shape == fx.shape) or h.ndim != 2:
            raise ValueError("observation grids must share one 2-d shape")
        if (h < 0).any():
            raise ValueError("negative stack height")
        if not np.array_equal(tc == EMPTY, h == 0):
            raise ValueError("top_color must be 0 exactly where height is 0")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "top_color", tc)
        object.__setattr__(self, "fixtures", fx)

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    def with_held(self, held: Optional[int]) -> "GridObservation":
        return GridObservation(self.heights, self.top_color, self.fixtures, held)

    def __eq__(self, other):
        if not isinstance(other, GridObservation):
            return NotImplemented
        return (
            self.held == other.held
            and np.array_equal(self.heights, other.heights)
            and np.array_equal(self.top_color, other.top_color)
            and np.array_equal(self.fixtures, other.fixtures)
        )

    def __hash__(self):
        return hash((self.heights.tobytes(), self.top_color.tobytes(), self.fixtures.tobytes(), self.held))

    def to_record(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "heights": self.heights.tolist(),
            "top_color": self.top_color.tolist(),
            "fixtures": self.fixtures.tolist(),
            "held": self.held,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GridObservation":
        obs = cls(np.array(rec["heights"]), np.array(rec["top_color"]), np.array(rec["fixtures"]), rec["held"])
        if (obs.width, obs.height) != (rec["width"], rec["height"]):
            raise ValueError("record dims disagree with grids")
        return obs


@dataclass(frozen=True)
class Action:
    high: HighAction
    pick_or_push: LowAction
    place: Optional[LowAction] = None
    exploratory: bool = False

    def validate(self, width: int, height: int, k_push: int, k_pick: int = 1, k_place: int = 1) -> None:
        """Raise ``ValueError`` unless the action is well formed for the given grid."""
        if (self.place is not None) != (self.high == HighAction.PICKPLACE):
            raise ValueError("place must be present iff high action is PickPlace")
        k_first = k_push if self.high == HighAction.PUSH else k_pick
        _check_low(self.pick_or_push, width, height, k_first)
        if self.place is not None:
            _check_low(self.place, width, height, k_place)

    def to_record(self) -> dict:
        return {
            "high": self.high.name,
            "pick_or_push": list(self.pick_or_push),
            "place": None if self.place is None else list(self.place),
            "exploratory": self.exploratory,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Action":
        place = rec["place"]
        return cls(
            HighAction[rec["high"]],
            tuple(int(v) for v in rec["pick_or_push"]),
            None if place is None else tuple(int(v) for v in place),
            bool(rec["exploratory"]),
        )


def _check_low(a: LowAction, width: int, height: int, k: int) -> None:
    if len(a) != 3:
        raise ValueError(f"low-level action needs (x, y, theta), got {a!r}")
    x, y, th = a
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"cell {(x, y)} outside {width}x{height} grid")
    if not 0 <= th < k:
        raise ValueError(f"theta {th} outside [0, {k})")


@dataclass(frozen=True)
class Transition:
    obs: GridObservation
    action: Action
    reward: float
    next_obs: GridObservation
    progress_delta: Fraction
    done: bool
    push_success: bool
    pickplace_success: bool

    def to_record(self) -> dict:
        pd = Fraction(self.progress_delta)
        return {
            "obs": self.obs.to_record(),
            "action": self.action.to_record(),
            "reward": self.reward,
            "next_obs": self.next_obs.to_record(),
            "progress_delta": [pd.numerator, pd.denominator],
            "done": self.done,
            "push_success": self.push_success,
            "pickplace_success": self.pickplace_success,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transition":
        num, den = rec["progress_delta"]
        return cls(
            GridObservation.from_record(rec["obs"]),
            Action.from_record(rec["action"]),
            float(rec["reward"]),
            GridObservation.from_record(rec["next_obs"]),
            Fraction(num, den),
            bool(rec["done"]),
            bool(rec["push_success"]),
            bool(rec["pickplace_success"]),
        )


def dumps_record(rec: dict) -> str:
    """One line of the canonical line-delimited format."""
    return json.dumps(rec, separators=(",", ":"))


def loads_record(line: str) -> dict:
    return json.loads(line)


class Rng:
    """Seeded counter-based (Philox) random stream.

    Children made with :func:`split_rng` are keyed on ``(seed, label)`` only, so drawing
    from one purpose never shifts another purpose's stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def draw_u64(self, n: int) -> list[int]:
        return [int(v) for v in self.gen.integers(0, 2**64, size=n, dtype=np.uint64)]

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def split_rng(parent: Rng, label: str) -> Rng:
    if not label:
        raise ValueError("label must be non-empty")
    digest = hashlib.blake2b(f"{parent.seed}/{label}".encode(), digest_size=8).digest()
    return Rng(int.from_bytes(digest, "little"))
