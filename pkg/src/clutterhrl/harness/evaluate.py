"""Batched greedy rollouts and the success-rate / episode-length report."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..core import HighAction, Rng, dumps_record, split_rng
from ..sim import render
from ..tasks import TaskSpec, execute
from ..updates import stp_reward
from .policies import Policy


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    pushes: int
    success: bool
    progress: float
    total_reward: float
    trace: Optional[list] = None  # (obs, action) pairs; action None for the final frame

    def to_record(self) -> dict:
        return {
            "episode": self.episode,
            "steps": self.steps,
            "pushes": self.pushes,
            "success": self.success,
            "progress": self.progress,
            "total_reward": self.total_reward,
        }


@dataclass
class EvalReport:
    task: str
    episodes: int
    success_rate: float
    avg_episode_length: float
    records: list = field(default_factory=list)
    n_additional: Optional[int] = None
    policy: str = ""

    @classmethod
    def from_records(cls, task: str, records: Sequence[EpisodeRecord], **kw) -> "EvalReport":
        n = len(records)
        succ = sum(r.success for r in records)
        return cls(
            task=task,
            episodes=n,
            success_rate=100.0 * succ / n if n else 0.0,
            avg_episode_length=sum(r.steps for r in records) / n if n else 0.0,
            records=list(records),
            **kw,
        )

    def summary(self) -> dict:
        return {
            "task": self.task,
            "policy": self.policy,
            "n_additional": self.n_additional,
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "avg_episode_length": self.avg_episode_length,
        }

    def to_lines(self) -> list[str]:
        head = dict(self.summary(), type="report")
        return [dumps_record(head)] + [dumps_record(dict(r.to_record(), type="episode")) for r in self.records]

    def text(self) -> str:
        return (
            f"task={self.task} policy={self.policy} n_additional={self.n_additional} "
            f"episodes={self.episodes} success_rate={self.success_rate:.1f}% "
            f"avg_episode_length={self.avg_episode_length:.2f}"
        )


def episode_rngs(seed: int, episodes: int) -> list:
    """Per-episode streams keyed on (seed, episode index) only."""
    base = Rng(seed)
    return [split_rng(base, f"episode-{i}") for i in range(episodes)]


def rollout(
    policy: Policy,
    spec: TaskSpec,
    rngs: Sequence[Rng],
    n_additional: Optional[int] = None,
    keep_trace: bool = False,
) -> list:
    """Run one episode per rng in lockstep. An episode ends on success or after
    ``spec.max_steps`` steps; failures count the full step budget."""
    states = [spec.build(split_rng(r, "env"), n_additional) for r in rngs]
    policy_rngs = [split_rng(r, "policy") for r in rngs]
    n = len(states)
    steps = [0] * n
    pushes = [0] * n
    reward = [0.0] * n
    traces = [[] for _ in range(n)] if keep_trace else None
    active = [i for i in range(n) if not spec.is_success(states[i])]
    for t in range(spec.max_steps):
        if not active:
            break
        obs = [render(states[i]) for i in active]
        actions = policy.act_batch([states[i] for i in active], obs, [policy_rngs[i] for i in active], t)
        still = []
        for i, o, a in zip(active, obs, actions):
            out = execute(spec, states[i], a)
            if traces is not None:
                traces[i].append((o, a))
            steps[i] += 1
            pushes[i] += a.high == HighAction.PUSH
            reward[i] += stp_reward(a.high, out.progress_delta, out.push_success, out.pickplace_success)
            states[i] = out.state
            if not out.done:
                still.append(i)
        active = still
    records = []
    for i in range(n):
        trace = None
        if traces is not None:
            trace = traces[i] + [(render(states[i]), None)]
        records.append(
            EpisodeRecord(i, steps[i], pushes[i], spec.is_success(states[i]), float(spec.progress(states[i])), reward[i], trace)
        )
    return records


def evaluate(
    policy: Policy,
    spec: TaskSpec,
    episodes: int,
    seed: int,
    n_additional: Optional[int] = None,
    keep_trace: bool = False,
) -> EvalReport:
    records = rollout(policy, spec, episode_rngs(seed, episodes), n_additional, keep_trace)
    n_add = spec.n_additional if n_additional is None else n_additional
    return EvalReport.from_records(spec.name, records, n_additional=n_add, policy=policy.name)


def clutter_sweep(policy: Policy, spec: TaskSpec, counts: Sequence[int], episodes: int, seed: int) -> list:
    """Evaluate the same policy, without retraining, at each clutter count."""
    return [evaluate(policy, spec, episodes, seed, n_additional=c) for c in counts]
