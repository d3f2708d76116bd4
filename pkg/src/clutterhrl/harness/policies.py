"""Policies that map a batch of scenes to one high-level step each."""

from __future__ import annotations

import enum
from typing import Optional, Sequence

from ..core import Action, GridObservation, HighAction, Rng
from ..scorer import DualScorer, PickPlaceScorer, select_cell, select_high, select_push
from ..sim import WorldState


class PolicyVariant(enum.Enum):
    HCLM = "hclm"
    PICK_PLACE_ONLY = "pick-place-only"
    PICK_PLACE_RANDOM_PUSH = "pick-place-random-push"
    ALTERNATING = "alternating"
    NO_TSUS = "no-tsus"
    NO_SEQ = "no-seq"

    @property
    def trains_hrl(self) -> bool:
        return self in (PolicyVariant.HCLM, PolicyVariant.NO_TSUS, PolicyVariant.NO_SEQ)

    @property
    def use_seq(self) -> bool:
        return self is not PolicyVariant.NO_SEQ

    @property
    def use_tsus(self) -> bool:
        return self is not PolicyVariant.NO_TSUS


def pickplace_actions(scorer: PickPlaceScorer, obs: Sequence[GridObservation]) -> list:
    """Greedy (pick cell, place cell) per observation. The place map is evaluated on
    the same observation with the picked block's colour as the held colour."""
    q_pick, _ = scorer.forward_batch("pick", obs)
    picks = [select_cell(q)[:2] for q in q_pick]
    place_obs = []
    for o, (x, y) in zip(obs, picks):
        color = int(o.top_color[y, x])
        place_obs.append(o.with_held(color if color else None))
    q_place, _ = scorer.forward_batch("place", place_obs)
    return [(p, select_cell(q)[:2]) for p, q in zip(picks, q_place)]


def random_push(rng: Rng, width: int, height: int, k_push: int) -> tuple:
    x, y, th = rng.integers(0, [width, height, k_push])
    return int(x), int(y), int(th)


def _pp_action(pick, place) -> Action:
    return Action(HighAction.PICKPLACE, (pick[0], pick[1], 0), (place[0], place[1], 0))


class Policy:
    name = "policy"

    def act_batch(self, states: Sequence[WorldState], obs: Sequence[GridObservation], rngs: Sequence[Rng], t: int) -> list:
        raise NotImplementedError


class HierarchicalPolicy(Policy):
    """Dual scorer for the high level and push; frozen pick/place heads.

    ``eps_high``/``eps_push`` are exploration rates (0 means greedy). A randomly
    drawn push is flagged exploratory; a random high-level choice is not.
    """

    name = "hclm"

    def __init__(self, dual: DualScorer, pickplace: PickPlaceScorer, eps_high: float = 0.0, eps_push: float = 0.0):
        self.dual = dual
        self.pickplace = pickplace
        self.eps_high = eps_high
        self.eps_push = eps_push

    def act_batch(self, states, obs, rngs, t):
        n = len(obs)
        highs: list = [None] * n
        explore = [False] * n
        for i, rng in enumerate(rngs):
            if self.eps_high > 0 and rng.random() < self.eps_high:
                highs[i] = HighAction(int(rng.integers(2)))
            explore[i] = self.eps_push > 0 and rng.random() < self.eps_push
        need = [i for i in range(n) if highs[i] is None or (highs[i] == HighAction.PUSH and not explore[i])]
        q_of = {}
        if need:
            q_push, q_high, _ = self.dual.forward_batch([obs[i] for i in need])
            q_of = {i: (q_push[j], q_high[j]) for j, i in enumerate(need)}
        for i in range(n):
            if highs[i] is None:
                highs[i] = select_high(q_of[i][1])
        actions: list = [None] * n
        pp_idx = [i for i in range(n) if highs[i] == HighAction.PICKPLACE]
        if pp_idx:
            for i, (pick, place) in zip(pp_idx, pickplace_actions(self.pickplace, [obs[i] for i in pp_idx])):
                actions[i] = _pp_action(pick, place)
        k = self.dual.cfg.k_push
        for i in range(n):
            if highs[i] != HighAction.PUSH:
                continue
            o = obs[i]
            if explore[i]:
                actions[i] = Action(HighAction.PUSH, random_push(rngs[i], o.width, o.height, k), None, True)
            else:
                actions[i] = Action(HighAction.PUSH, select_push(q_of[i][0]), None, False)
        return actions


class PickPlaceOnlyPolicy(Policy):
    name = "pick-place-only"

    def __init__(self, pickplace: PickPlaceScorer):
        self.pickplace = pickplace

    def act_batch(self, states, obs, rngs, t):
        return [_pp_action(p, l) for p, l in pickplace_actions(self.pickplace, obs)]


class AlternatingPolicy(Policy):
    """Pick&place on even steps, push on odd steps. Pushes come from the dual
    scorer's greedy push map, or are uniformly random when no scorer is given."""

    def __init__(self, pickplace: PickPlaceScorer, dual: Optional[DualScorer] = None, k_push: int = 8):
        self.pickplace = pickplace
        self.dual = dual
        self.k_push = k_push if dual is None else dual.cfg.k_push
        self.name = "alternating" if dual is not None else "pick-place-random-push"

    def act_batch(self, states, obs, rngs, t):
        if t % 2 == 0:
            return [_pp_action(p, l) for p, l in pickplace_actions(self.pickplace, obs)]
        if self.dual is None:
            return [
                Action(HighAction.PUSH, random_push(r, o.width, o.height, self.k_push), None, True)
                for o, r in zip(obs, rngs)
            ]
        q_push, _, _ = self.dual.forward_batch(list(obs))
        return [Action(HighAction.PUSH, select_push(q), None, False) for q in q_push]


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, k_push: int = 8):
        self.k_push = k_push

    def act_batch(self, states, obs, rngs, t):
        out = []
        for o, rng in zip(obs, rngs):
            if rng.random() < 0.5:
                out.append(Action(HighAction.PUSH, random_push(rng, o.width, o.height, self.k_push), None, True))
            else:
                px, py, lx, ly = (int(v) for v in rng.integers(0, [o.width, o.height, o.width, o.height]))
                out.append(_pp_action((px, py), (lx, ly)))
        return out


class OraclePolicy(Policy):
    """Scripted expert; falls back to a random push when the oracle has no move."""

    name = "oracle"

    def __init__(self, spec, k_push: int = 8):
        self.spec = spec
        self.k_push = k_push

    def act_batch(self, states, obs, rngs, t):
        out = []
        for s, o, rng in zip(states, obs, rngs):
            move = self.spec.oracle(s)
            if move is None:
                out.append(Action(HighAction.PUSH, random_push(rng, o.width, o.height, self.k_push), None, True))
            else:
                out.append(_pp_action(*move))
        return out
