"""Deterministic grid physics for the push, pick and place primitives.

Blocks live in per-cell stacks (bottom to top); only the top of each stack is
visible, which is what makes buried targets unreachable until they are uncovered.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import EMPTY, GREY, Cell, GridObservation, Rng, split_rng

# Clockwise on screen (y grows downward), starting east.
NEIGHBORS8 = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))
CARDINAL4 = ((1, 0), (0, 1), (-1, 0), (0, -1))
MAX_STACK = 4

Stacks = tuple  # tuple[tuple[tuple[int, ...], ...], ...] indexed [y][x]


@dataclass(frozen=True)
class PushGeometry:
    length: int = 3
    directions: tuple = NEIGHBORS8

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("push length must be >= 1")
        if len(set(self.directions)) != len(self.directions):
            raise ValueError("push directions must be distinct")
        for d in self.directions:
            if d not in NEIGHBORS8:
                raise ValueError(f"direction {d} is not a grid unit offset")

    @property
    def k(self) -> int:
        return len(self.directions)


DEFAULT_GEOMETRY = PushGeometry()


@dataclass(frozen=True, eq=False)
class WorldState:
    stacks: Stacks
    fixtures: np.ndarray
    held: Optional[int] = None
    step_count: int = 0

    def __post_init__(self):
        fx = np.array(self.fixtures, dtype=np.int64)
        fx.setflags(write=False)
        object.__setattr__(self, "fixtures", fx)
        object.__setattr__(self, "stacks", tuple(tuple(tuple(c) for c in row) for row in self.stacks))
        if fx.shape != (len(self.stacks), len(self.stacks[0])):
            raise ValueError("fixture grid shape disagrees with stacks")

    @classmethod
    def empty(cls, width: int, height: int, fixtures=None) -> "WorldState":
        fx = np.zeros((height, width), dtype=np.int64) if fixtures is None else fixtures
        return cls(tuple(tuple(() for _ in range(width)) for _ in range(height)), fx)

    @property
    def width(self) -> int:
        return len(self.stacks[0])

    @property
    def height(self) -> int:
        return len(self.stacks)

    def stack(self, x: int, y: int) -> tuple:
        return self.stacks[y][x]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def block_count(self) -> int:
        return sum(len(c) for row in self.stacks for c in row) + (self.held is not None)

    def heights(self) -> np.ndarray:
        return np.array([[len(c) for c in row] for row in self.stacks], dtype=np.int64)

    def find(self, color: int) -> list[tuple[int, int, int]]:
        """All (x, y, level) positions of blocks with this color."""
        return [
            (x, y, lvl)
            for y, row in enumerate(self.stacks)
            for x, col in enumerate(row)
            for lvl, c in enumerate(col)
            if c == color
        ]

    def with_stacks(self, stacks, **kw) -> "WorldState":
        return replace(self, stacks=stacks, **kw)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (
            self.stacks == other.stacks
            and self.held == other.held
            and self.step_count == other.step_count
            and np.array_equal(self.fixtures, other.fixtures)
        )

    def __hash__(self):
        return hash((self.stacks, self.held, self.step_count, self.fixtures.tobytes()))


def _mutable(stacks) -> list:
    return [[list(c) for c in row] for row in stacks]


def _topple_cell(grid: list, x: int, y: int, start_dir: int) -> Optional[Cell]:
    """First in-bounds 8-neighbour of (x, y), scanning clockwise from ``start_dir``,
    whose stack is strictly lower than the stack at (x, y)."""
    h, w = len(grid), len(grid[0])
    here = len(grid[y][x])
    for i in range(8):
        dx, dy = NEIGHBORS8[(start_dir + i) % 8]
        nx, ny = x + dx, y + dy
        if 0 <= nx < w and 0 <= ny < h and len(grid[ny][nx]) < here:
            return nx, ny
    return None


def _drop(grid: list, x: int, y: int, block, max_stack: int, start_dir: int = 0) -> Cell:
    """Set a block down on (x, y); an over-tall stack sheds it onto a lower neighbour."""
    if len(grid[y][x]) >= max_stack:
        dest = _topple_cell(grid, x, y, start_dir)
        if dest is not None:
            x, y = dest
    grid[y][x].append(block)
    return x, y


def apply_push(state: WorldState, x: int, y: int, theta: int, geom: PushGeometry = DEFAULT_GEOMETRY):
    """Sweep a one-cell front ``geom.length`` cells from (x, y) along direction ``theta``.

    Every cell the front enters has its top block shoved one cell ahead. A block shoved
    onto a stack of height >= 2 topples to the first lower neighbour of that stack
    (scan starts in the push direction, then clockwise). A block that would leave the
    grid stays put. Success means some block ends at a lower level than it started.
    """
    if not 0 <= theta < geom.k:
        raise ValueError(f"theta {theta} outside [0, {geom.k})")
    if not state.in_bounds(x, y):
        return state, False
    dx, dy = geom.directions[theta]
    dir8 = NEIGHBORS8.index((dx, dy))
    # Tag each block with its starting level so lowering can be detected exactly.
    grid = [[[(c, lvl) for lvl, c in enumerate(col)] for col in row] for row in state.stacks]
    cx, cy = x, y
    for _ in range(geom.length):
        cx, cy = cx + dx, cy + dy
        if not state.in_bounds(cx, cy):
            break
        col = grid[cy][cx]
        if not col:
            continue
        nx, ny = cx + dx, cy + dy
        if not state.in_bounds(nx, ny):
            continue
        if len(grid[ny][nx]) >= 2:
            dest = _topple_cell(grid, nx, ny, dir8)
            if dest is None:
                continue
            nx, ny = dest
        grid[ny][nx].append(col.pop())
    lowered = any(
        lvl < orig for row in grid for col in row for lvl, (_, orig) in enumerate(col)
    )
    stacks = tuple(tuple(tuple(c for c, _ in col) for col in row) for row in grid)
    return state.with_stacks(stacks, step_count=state.step_count + 1), lowered


def apply_pick(state: WorldState, x: int, y: int):
    """Lift the top block at (x, y) into the gripper. Only the top block is reachable."""
    if state.held is not None:
        raise ValueError("pick while already holding a block")
    if not state.in_bounds(x, y) or not state.stacks[y][x]:
        return state, False
    grid = _mutable(state.stacks)
    block = grid[y][x].pop()
    return state.with_stacks(grid, held=block, step_count=state.step_count + 1), True


def apply_place(state: WorldState, x: int, y: int, max_stack: int = MAX_STACK):
    if state.held is None:
        raise ValueError("place called with an empty gripper")
    if not state.in_bounds(x, y):
        raise ValueError(f"place cell {(x, y)} out of bounds")
    grid = _mutable(state.stacks)
    _drop(grid, x, y, state.held, max_stack)
    return state.with_stacks(grid, held=None, step_count=state.step_count + 1), True


def render(state: WorldState) -> GridObservation:
    heights = state.heights()
    top = np.array([[col[-1] if col else EMPTY for col in row] for row in state.stacks], dtype=np.int64)
    return GridObservation(heights, top, state.fixtures, state.held)


def scatter_clutter(
    state: WorldState,
    targets: Sequence[Cell],
    n_additional: int,
    rng: Rng,
    bury_all: bool = False,
    max_stack: int = MAX_STACK,
) -> WorldState:
    """Drop grey blocks onto or next to the targets.

    At least ceil(n/2) land directly on a target stack. With ``bury_all`` the first
    greys cover every target once (as far as n allows) before the rest are scattered.
    """
    if n_additional < 0:
        raise ValueError("n_additional must be >= 0")
    if n_additional == 0 or not targets:
        return state
    targets = [tuple(t) for t in targets]
    grid = _mutable(state.stacks)
    direct = (n_additional + 1) // 2
    placed = 0
    if bury_all:
        for i in rng.permutation(len(targets))[:n_additional]:
            tx, ty = targets[int(i)]
            _drop(grid, tx, ty, GREY, max_stack)
            placed += 1
    while placed < direct:
        tx, ty = targets[int(rng.integers(len(targets)))]
        _drop(grid, tx, ty, GREY, max_stack)
        placed += 1
    while placed < n_additional:
        tx, ty = targets[int(rng.integers(len(targets)))]
        ox, oy = (int(v) for v in rng.integers(-1, 2, size=2))
        cx = min(max(tx + ox, 0), state.width - 1)
        cy = min(max(ty + oy, 0), state.height - 1)
        _drop(grid, cx, cy, GREY, max_stack)
        placed += 1
    return state.with_stacks(grid)


@dataclass
class Scene:
    """Static scene description: fixtures, target blocks, clutter count and seed."""

    width: int
    height: int
    fixtures: list = field(default_factory=list)  # [x, y, fixture_id]
    targets: list = field(default_factory=list)  # [x, y, color]
    n_additional: int = 0
    seed: int = 0
    bury_all: bool = False

    def build(self) -> WorldState:
        fx = np.zeros((self.height, self.width), dtype=np.int64)
        for x, y, fid in self.fixtures:
            fx[y, x] = fid
        grid = [[[] for _ in range(self.width)] for _ in range(self.height)]
        for x, y, color in self.targets:
            grid[y][x].append(color)
        state = WorldState(grid, fx)
        cells = [(x, y) for x, y, _ in self.targets]
        rng = split_rng(Rng(self.seed), "clutter")
        return scatter_clutter(state, cells, self.n_additional, rng, bury_all=self.bury_all)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fixtures": [list(f) for f in self.fixtures],
            "targets": [list(t) for t in self.targets],
            "n_additional": self.n_additional,
            "seed": self.seed,
            "bury_all": self.bury_all,
        }


def load_scene(path) -> Scene:
    data = json.loads(Path(path).read_text())
    unknown = set(data) - set(Scene.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    return Scene(**data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1) + "\n")
