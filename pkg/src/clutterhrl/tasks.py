"""Grid-scale cluttered rearrangement tasks.

Each task is a fixed ordered list of subtasks. Progress is the length of the satisfied
prefix over the subtask count, so knocking down earlier structure shows up as a
negative progress change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import GREY, Action, Cell, GridObservation, HighAction, Rng, dumps_record, loads_record, split_rng
from .sim import DEFAULT_GEOMETRY, MAX_STACK, PushGeometry, WorldState, apply_pick, apply_place, apply_push, render, scatter_clutter

DEMO_PALETTE = (2, 3, 4, 5, 6, 7)
UNSEEN_PALETTE = (8, 9)
N_COLORS = 10
GOAL_IDS = (1, 2, 3, 4)
WALL_ID = 5
N_FIXTURE_IDS = 6

RED, GREEN_ZONE = 2, 2

TASK_NAMES = (
    "block-insertion",
    "place-red-in-green",
    "align-box-corner",
    "stack-block-pyramid",
    "block-stacking",
    "packing-boxes",
)


@dataclass(frozen=True)
class Subtask:
    color: Optional[int]  # None accepts any non-grey block
    predicate: Callable[[WorldState], bool]

    def accepts(self, color: Optional[int]) -> bool:
        if color is None or color == GREY or color == 0:
            return False
        return self.color is None or color == self.color


def fixture_cells(state: WorldState, fid: int) -> list[Cell]:
    ys, xs = np.nonzero(state.fixtures == fid)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


def _slot_prefix(slot: int, expected: tuple) -> Callable[[WorldState], bool]:
    def pred(state: WorldState) -> bool:
        cells = fixture_cells(state, slot)
        if not cells:
            return False
        x, y = cells[0]
        col = state.stacks[y][x]
        return len(col) >= len(expected) and tuple(col[: len(expected)]) == expected

    return pred


def _zone_count(zone: int, need: int, color: Optional[int]) -> Callable[[WorldState], bool]:
    def pred(state: WorldState) -> bool:
        n = 0
        for x, y in fixture_cells(state, zone):
            col = state.stacks[y][x]
            if col and (col[0] == color if color is not None else col[0] not in (GREY, 0)):
                n += 1
        return n >= need

    return pred


@dataclass(frozen=True)
class _Plan:
    # slot tasks: (color, slot id, level); zone tasks: zone id
    slots: tuple = ()
    zone: Optional[int] = None
    zone_color: Optional[int] = None
    n_zone: int = 0


@dataclass(frozen=True)
class TaskSpec:
    name: str
    width: int
    height: int
    subtasks: tuple
    max_steps: int
    n_additional: int
    plan: _Plan
    layout: Callable = field(repr=False)
    unseen: bool = False
    bury_all: bool = False

    def build(self, rng: Rng, n_additional: Optional[int] = None, demo: bool = False) -> WorldState:
        """Fresh scene. ``demo`` draws colours from the demo palette even for tasks whose
        evaluation objects are unseen colours."""
        n = self.n_additional if n_additional is None else n_additional
        palette = DEMO_PALETTE if (demo or not self.unseen) else UNSEEN_PALETTE
        fixtures, targets = self.layout(split_rng(rng, "layout"), self.width, self.height, palette)
        fx = np.zeros((self.height, self.width), dtype=np.int64)
        for x, y, fid in fixtures:
            fx[y, x] = fid
        grid = [[[] for _ in range(self.width)] for _ in range(self.height)]
        for x, y, color in targets:
            grid[y][x].append(color)
        state = WorldState(grid, fx)
        cells = [(x, y) for x, y, _ in targets]
        return scatter_clutter(state, cells, n, split_rng(rng, "clutter"), bury_all=self.bury_all)

    def satisfied_prefix(self, state: WorldState) -> int:
        n = 0
        for sub in self.subtasks:
            if not sub.predicate(state):
                break
            n += 1
        return n

    def progress(self, state: WorldState) -> Fraction:
        return Fraction(self.satisfied_prefix(state), len(self.subtasks))

    def is_success(self, state: WorldState) -> bool:
        return self.satisfied_prefix(state) == len(self.subtasks)

    def next_subtask(self, state: WorldState) -> Optional[int]:
        i = self.satisfied_prefix(state)
        return None if i == len(self.subtasks) else i

    def place_cell(self, state: WorldState, i: int) -> Optional[Cell]:
        if self.plan.zone is None:
            _, slot, _ = self.plan.slots[i]
            cells = fixture_cells(state, slot)
            return cells[0] if cells else None
        for x, y in fixture_cells(state, self.plan.zone):
            if not state.stacks[y][x]:
                return x, y
        return None

    def oracle(self, state: WorldState) -> Optional[tuple[Cell, Cell]]:
        """Expert (pick cell, place cell) for the next subtask, or None when its target
        block is not on top of any stack outside the goal cells."""
        if state.held is not None:
            return None
        i = self.next_subtask(state)
        if i is None:
            return None
        sub = self.subtasks[i]
        goal = np.isin(state.fixtures, GOAL_IDS)
        for y, row in enumerate(state.stacks):
            for x, col in enumerate(row):
                if col and not goal[y, x] and sub.accepts(col[-1]):
                    place = self.place_cell(state, i)
                    return None if place is None else ((x, y), place)
        return None


def _regions(width: int, height: int):
    m = 1 if min(width, height) >= 8 else 0  # border margin and centre gap
    half = width // 2
    left = [(x, y) for y in range(m, height - m) for x in range(m, half)]
    right = [(x, y) for y in range(m, height - m) for x in range(half + m, width - m)]
    return left, right


def _pick_cells(rng: Rng, cells: list, n: int) -> list:
    idx = rng.permutation(len(cells))[:n]
    return [cells[int(i)] for i in idx]


def _row_anchor(rng: Rng, left: list, run: int):
    """A cell in the left region with ``run - 1`` further left-region cells to its east."""
    lset = set(left)
    ok = [(x, y) for x, y in left if all((x + i, y) in lset for i in range(run))]
    return ok[int(rng.integers(len(ok)))]


def _block_layout(width, height, rng, colors, fixtures):
    _, right = _regions(width, height)
    cells = _pick_cells(rng, right, len(colors))
    return fixtures, [(x, y, c) for (x, y), c in zip(cells, colors)]


def _slot_layout(run: int, colors_of: Callable):
    def layout(rng, width, height, palette):
        left, _ = _regions(width, height)
        ax, ay = _row_anchor(rng, left, run)
        fixtures = [(ax + i, ay, i + 1) for i in range(run)]
        return _block_layout(width, height, rng, colors_of(rng, palette), fixtures)

    return layout


def _zone_layout(colors_of: Callable):
    def layout(rng, width, height, palette):
        left, _ = _regions(width, height)
        lset = set(left)
        ok = [(x, y) for x, y in left if {(x + 1, y), (x, y + 1), (x + 1, y + 1)} <= lset]
        ax, ay = ok[int(rng.integers(len(ok)))]
        fixtures = [(ax + dx, ay + dy, GREEN_ZONE) for dy in (0, 1) for dx in (0, 1)]
        return _block_layout(width, height, rng, colors_of(rng, palette), fixtures)

    return layout


def _corner_layout(rng, width, height, palette):
    left, _ = _regions(width, height)
    lset = set(left)
    flips = [(sx, sy) for sx in (-1, 1) for sy in (-1, 1)]
    sx, sy = flips[int(rng.integers(4))]
    ok = [(x, y) for x, y in left if {(x + sx, y), (x, y + sy), (x + sx, y + sy)} <= lset]
    cx, cy = ok[int(rng.integers(len(ok)))]
    fixtures = [(cx, cy, 1), (cx + sx, cy, WALL_ID), (cx, cy + sy, WALL_ID), (cx + sx, cy + sy, WALL_ID)]
    color = palette[int(rng.integers(len(palette)))]
    return _block_layout(width, height, rng, [color], fixtures)


def _random_colors(n):
    return lambda rng, palette: [palette[int(i)] for i in rng.integers(len(palette), size=n)]


def _slot_subtasks(slots):
    per_slot: dict = {}
    subs = []
    for color, slot, level in slots:
        per_slot.setdefault(slot, []).append(color)
        if len(per_slot[slot]) != level + 1:
            raise ValueError("slot levels must be filled bottom-up")
        subs.append(Subtask(color, _slot_prefix(slot, tuple(per_slot[slot]))))
    return tuple(subs)


def make_task(
    name: str,
    width: int = 12,
    height: int = 12,
    n_additional: int = 6,
    bury_all: bool = False,
    max_steps: Optional[int] = None,
) -> TaskSpec:
    """Build one of the six task analogs on a ``width`` x ``height`` grid."""
    unseen = False
    if name == "block-insertion":
        plan = _Plan(slots=((2, 1, 0),))
        layout = _slot_layout(1, lambda rng, pal: [2])
    elif name == "stack-block-pyramid":
        # 3-2-1 staircase over slots 1..3, base layer first.
        plan = _Plan(slots=((2, 1, 0), (3, 2, 0), (4, 3, 0), (5, 1, 1), (6, 2, 1), (7, 1, 2)))
        layout = _slot_layout(3, lambda rng, pal: [2, 3, 4, 5, 6, 7])
    elif name == "block-stacking":
        plan = _Plan(slots=((2, 1, 0), (3, 1, 1), (4, 1, 2), (5, 1, 3)))
        layout = _slot_layout(1, lambda rng, pal: [2, 3, 4, 5])
    elif name == "align-box-corner":
        plan = _Plan(slots=((None, 1, 0),))
        layout = _corner_layout
        unseen = True
    elif name == "place-red-in-green":
        plan = _Plan(zone=GREEN_ZONE, zone_color=RED, n_zone=2)
        layout = _zone_layout(lambda rng, pal: [RED, RED, 3])
    elif name == "packing-boxes":
        plan = _Plan(zone=GREEN_ZONE, zone_color=None, n_zone=4)
        layout = _zone_layout(_random_colors(4))
        unseen = True
    else:
        raise ValueError(f"unknown task {name!r}; expected one of {', '.join(TASK_NAMES)}")

    if plan.zone is None:
        if plan.slots[0][0] is None:
            subtasks = (Subtask(None, _corner_pred),)
        else:
            subtasks = _slot_subtasks(plan.slots)
    else:
        subtasks = tuple(
            Subtask(plan.zone_color, _zone_count(plan.zone, j + 1, plan.zone_color)) for j in range(plan.n_zone)
        )
    steps = 2 * len(subtasks) + 8 if max_steps is None else max_steps
    return TaskSpec(name, width, height, subtasks, steps, n_additional, plan, layout, unseen, bury_all)


def _corner_pred(state: WorldState) -> bool:
    cells = fixture_cells(state, 1)
    if not cells:
        return False
    x, y = cells[0]
    col = state.stacks[y][x]
    return bool(col) and col[0] not in (GREY, 0)


def progress_delta(spec: TaskSpec, before: WorldState, after: WorldState) -> Fraction:
    return spec.progress(after) - spec.progress(before)


def pickplace_success(spec: TaskSpec, action: Action, before: WorldState, after: WorldState) -> bool:
    if action.high != HighAction.PICKPLACE:
        raise ValueError("pickplace_success needs a PickPlace action")
    i = spec.next_subtask(before)
    if i is None:
        return False
    x, y, _ = action.pick_or_push
    col = before.stacks[y][x]
    if not col or not spec.subtasks[i].accepts(col[-1]):
        return False
    return spec.subtasks[i].predicate(after)


@dataclass(frozen=True)
class StepOutcome:
    state: WorldState
    push_success: bool
    pickplace_success: bool
    progress_delta: Fraction
    done: bool


def execute(
    spec: TaskSpec,
    state: WorldState,
    action: Action,
    geom: PushGeometry = DEFAULT_GEOMETRY,
    max_stack: int = MAX_STACK,
) -> StepOutcome:
    """Run one high-level step. A pick&place pair counts as a single step."""
    push_ok = pp_ok = False
    if action.high == HighAction.PUSH:
        x, y, th = action.pick_or_push
        after, push_ok = apply_push(state, x, y, th, geom)
    else:
        x, y, _ = action.pick_or_push
        after, picked = apply_pick(state, x, y)
        if picked:
            px, py, _ = action.place
            after, _ = apply_place(after, px, py, max_stack)
            pp_ok = pickplace_success(spec, action, state, after)
    delta = progress_delta(spec, state, after)
    return StepOutcome(after, push_ok, pp_ok, delta, spec.is_success(after))


@dataclass
class DemoEpisode:
    steps: list  # (GridObservation, pick cell, place cell)
    stalled: bool = False
    final_progress: Fraction = Fraction(0)


def run_oracle_episode(spec: TaskSpec, rng: Rng, cluttered: bool = False) -> DemoEpisode:
    state = spec.build(rng, n_additional=None if cluttered else 0, demo=True)
    steps = []
    for _ in range(spec.max_steps):
        if spec.is_success(state):
            break
        act = spec.oracle(state)
        if act is None:
            return DemoEpisode(steps, stalled=True, final_progress=spec.progress(state))
        (px, py), (lx, ly) = act
        steps.append((render(state), (px, py), (lx, ly)))
        state, _ = apply_pick(state, px, py)
        state, _ = apply_place(state, lx, ly)
    return DemoEpisode(steps, stalled=False, final_progress=spec.progress(state))


def save_demos(episodes: list, path) -> None:
    with open(path, "w") as fh:
        for ep_i, ep in enumerate(episodes):
            for obs, pick, place in ep.steps:
                rec = {"episode": ep_i, "obs": obs.to_record(), "pick": list(pick), "place": list(place)}
                fh.write(dumps_record(rec) + "\n")


def load_demos(path) -> list:
    """Flat list of (GridObservation, pick cell, place cell) samples."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = loads_record(line)
            out.append((GridObservation.from_record(rec["obs"]), tuple(rec["pick"]), tuple(rec["place"])))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad demo record ({exc})") from exc
    return out
