"""Two-phase training: behaviour cloning for pick/place, then hierarchical Q-learning
for the high-level policy and push option with the pick/place heads frozen."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import HighAction, Rng, Transition, dumps_record, split_rng
from .harness.evaluate import episode_rngs, rollout
from .harness.policies import HierarchicalPolicy
from .replay import PrioritizedBuffer
from .scorer import DualScorer, PickPlaceScorer, ScorerConfig, clip_grad, make_optimizer, select_cell
from .sim import render
from .tasks import TaskSpec, execute, make_task, run_oracle_episode
from .updates import SeqConfig, TsusConfig, bc_loss, huber, seq_target, seq_td_error, single_td_error, stp_reward, tsus_gate, tsus_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    bc_epochs: int = 200
    bc_lr: float = 1e-2
    bc_optimizer: str = "sgd"
    bc_batch: int = 8
    bc_weight_decay: float = 1e-3
    demo_count: int = 100
    bc_validation_demos: int = 20
    hrl_epochs: int = 200
    episodes_per_epoch: int = 10
    hrl_lr: float = 1e-3
    hrl_optimizer: str = "adam"
    grad_clip: float = 10.0
    eps_high: float = 1.0
    eps_high_end: Optional[float] = None  # None keeps eps_high constant
    eps_push_start: float = 0.5
    eps_push_end: float = 0.1
    batch: int = 16
    huber_delta: float = 1.0
    buffer_capacity: int = 5000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_eps: float = 1e-3
    train_seed: int = 0
    validation_seed: int = 1
    test_seed: int = 2
    validation_episodes: int = 100

    def __post_init__(self):
        for name in ("bc_optimizer", "hrl_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ValueError(f"{name} must be 'sgd' or 'adam'")
        for name in ("eps_high", "eps_push_start", "eps_push_end", "eps_high_end"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class TaskConfig:
    name: str = "stack-block-pyramid"
    width: int = 12
    height: int = 12
    n_additional: int = 6
    bury_all: bool = False
    max_steps: Optional[int] = None

    def make(self) -> TaskSpec:
        return make_task(self.name, self.width, self.height, self.n_additional, self.bury_all, self.max_steps)


# Pick and place read single cells: the decision depends on the cell itself plus the
# global held/stage context, and a wider window lets clutter next to a target leak in.
PICKPLACE_SCORER = ScorerConfig(patch=1)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    seq: SeqConfig = field(default_factory=SeqConfig)
    tsus: TsusConfig = field(default_factory=lambda: TsusConfig(tau=100))
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    pickplace: ScorerConfig = PICKPLACE_SCORER
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        if self.tsus.tau > self.train.hrl_epochs:
            raise ValueError("tau must not exceed hrl_epochs")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


_SECTIONS = {
    "train": TrainConfig,
    "seq": SeqConfig,
    "tsus": TsusConfig,
    "scorer": ScorerConfig,
    "pickplace": ScorerConfig,
    "task": TaskConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig; unknown sections or keys raise ``ValueError``. A missing
    ``tsus.tau`` defaults to half the HRL epochs."""
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in _SECTIONS.items():
        sec = dict(data.get(name, {}))
        allowed = {f.name for f in fields(cls)}
        bad = set(sec) - allowed
        if bad:
            raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
        if name == "tsus" and "tau" not in sec:
            sec["tau"] = parts["train"].hrl_epochs // 2
        if name == "pickplace":
            sec = dict(asdict(PICKPLACE_SCORER), **sec)
        parts[name] = cls(**sec)
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LinearSchedule:
    start: float
    end: float
    total: int

    def __call__(self, n: int) -> float:
        if self.total <= 0:
            return self.end
        frac = min(max(n / self.total, 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


def epsilon(schedule: LinearSchedule, n: int) -> float:
    return schedule(n)


def push_schedule(cfg: TrainConfig) -> LinearSchedule:
    return LinearSchedule(cfg.eps_push_start, cfg.eps_push_end, cfg.hrl_epochs)


def high_schedule(cfg: TrainConfig) -> LinearSchedule:
    end = cfg.eps_high if cfg.eps_high_end is None else cfg.eps_high_end
    return LinearSchedule(cfg.eps_high, end, cfg.hrl_epochs)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- behaviour cloning


def collect_demos(spec: TaskSpec, episodes: int, rng: Rng) -> list:
    """Flat (obs, pick, place) samples from non-cluttered oracle episodes."""
    samples = []
    for i in range(episodes):
        ep = run_oracle_episode(spec, split_rng(rng, f"demo-{i}"), cluttered=False)
        if ep.stalled:
            log.warning("oracle stalled in demo episode %d; skipped", i)
            continue
        samples.extend(ep.steps)
    return samples


def _place_obs(samples):
    return [o.with_held(int(o.top_color[p[1], p[0]]) or None) for o, p, _ in samples]


def bc_accuracy(scorer: PickPlaceScorer, samples: list) -> float:
    """Fraction of samples whose pick and place argmax both match the expert."""
    if not samples:
        return 0.0
    q_pick, _ = scorer.forward_batch("pick", [s[0] for s in samples])
    q_place, _ = scorer.forward_batch("place", _place_obs(samples))
    hits = 0
    for (o, pick, place), qp, ql in zip(samples, q_pick, q_place):
        hits += select_cell(qp)[:2] == tuple(pick) and select_cell(ql)[:2] == tuple(place)
    return hits / len(samples)


def bc_gradient(scorer: PickPlaceScorer, samples: list):
    """Mean cross-entropy loss and gradient over a minibatch, both heads."""
    obs = [s[0] for s in samples]
    q_pick, c_pick = scorer.forward_batch("pick", obs)
    q_place, c_place = scorer.forward_batch("place", _place_obs(samples))
    d_pick = np.zeros_like(q_pick)
    d_place = np.zeros_like(q_place)
    loss = 0.0
    for i, (_, pick, place) in enumerate(samples):
        l1, g1 = bc_loss(q_pick[i], (pick[0], pick[1], 0))
        l2, g2 = bc_loss(q_place[i], (place[0], place[1], 0))
        loss += l1 + l2
        d_pick[i] = g1
        d_place[i] = g2
    n = len(samples)
    g = scorer.backward_batch(c_pick, d_pick / n)
    for k, v in scorer.backward_batch(c_place, d_place / n).items():
        g[k] += v
    return loss / n, g


def train_bc(
    spec: TaskSpec,
    cfg: TrainConfig,
    rng: Rng,
    scorer_cfg: ScorerConfig = PICKPLACE_SCORER,
    demos: Optional[list] = None,
    val_demos: Optional[list] = None,
    history: Optional[list] = None,
) -> PickPlaceScorer:
    """Fit the pick and place heads to oracle demonstrations and return the frozen
    checkpoint with the best validation accuracy (ties keep the earlier one)."""
    if demos is None:
        demos = collect_demos(spec, cfg.demo_count, split_rng(rng, "demos"))
    if val_demos is None:
        val_demos = collect_demos(spec, cfg.bc_validation_demos, split_rng(Rng(cfg.validation_seed), "demos"))
    scorer = PickPlaceScorer.init(scorer_cfg, split_rng(rng, "init"))
    best, best_acc = scorer, bc_accuracy(scorer, val_demos)
    order_rng = split_rng(rng, "bc-order")
    opt = make_optimizer(cfg.bc_optimizer, cfg.bc_lr)
    for epoch in range(cfg.bc_epochs):
        order = order_rng.permutation(len(demos))
        losses = []
        for start in range(0, len(order), cfg.bc_batch):
            batch = [demos[int(i)] for i in order[start : start + cfg.bc_batch]]
            loss, g = bc_gradient(scorer, batch)
            if cfg.bc_weight_decay:
                # Decay pulls weights of features never seen in demos (e.g. clutter) to zero.
                g = {k: v + cfg.bc_weight_decay * scorer.params[k] for k, v in g.items()}
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite BC loss at epoch {epoch}")
            scorer = opt.step(scorer, g)
            losses.append(loss)
        val_acc = bc_accuracy(scorer, val_demos)
        if history is not None:
            history.append(
                {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": bc_accuracy(scorer, demos), "val_acc": val_acc}
            )
        if val_acc > best_acc:
            best, best_acc = scorer, val_acc
    return best.freeze()


# ---------------------------------------------------------------- hierarchical RL


@dataclass
class UpdateStats:
    push_loss: float = 0.0
    high_loss: float = 0.0
    n_updates: int = 0


class HRLLearner:
    """Replay-driven value updates for the dual scorer.

    ``use_seq`` switches between the region update and the single-pixel update;
    ``use_tsus`` switches between the two-stage gate and an always-open gate.
    """

    def __init__(self, dual: DualScorer, cfg: TrainConfig, seq: SeqConfig, tsus: TsusConfig, use_seq=True, use_tsus=True):
        self.dual = dual
        self.cfg = cfg
        self.seq = seq
        self.tsus = tsus
        self.use_seq = use_seq
        self.use_tsus = use_tsus
        self.opt = make_optimizer(cfg.hrl_optimizer, cfg.hrl_lr)

    def gate(self, t: Transition, epoch: int) -> int:
        if not self.use_tsus:
            return 1
        return tsus_gate(self.tsus, t.action.high, t.reward, t.action.exploratory, epoch)

    def batch_gradient(self, batch: list, epoch: int):
        """Gradient of the IS-weighted Huber losses for a sampled batch.

        Returns ``(grads, priorities, push_loss, high_loss)``.
        """
        dual = self.dual
        obs = [t.obs for _, t, _ in batch]
        q_push, q_high, cache = dual.forward_batch(obs)
        # Bootstrap only where the reward is positive and the episode continues.
        boot_idx = [i for i, (_, t, _) in enumerate(batch) if t.reward > 0 and not t.done]
        qn_push = {}
        qn_high = {}
        if boot_idx:
            np_, nh, _ = dual.forward_batch([batch[i][1].next_obs for i in boot_idx])
            for j, i in enumerate(boot_idx):
                qn_push[i], qn_high[i] = np_[j], nh[j]
        zero = np.zeros(1)
        d_push = np.zeros_like(q_push)
        d_high = np.zeros_like(q_high)
        prios = []
        push_loss = high_loss = 0.0
        delta = self.cfg.huber_delta
        for i, (_, t, w) in enumerate(batch):
            a = t.action
            push_abs = 0.0
            if a.high == HighAction.PUSH:
                nxt = qn_push.get(i, zero)
                if self.use_seq:
                    target = seq_target(self.seq, t.reward, nxt)
                    err, mask = seq_td_error(self.seq, target, q_push[i], a.pick_or_push)
                else:
                    err, mask = single_td_error(self.seq, t.reward, nxt, q_push[i], a.pick_or_push)
                l, d = huber(err[mask], delta)
                push_loss += w * float(l.sum())
                d_push[i][mask] = w * d
                push_abs = float(np.abs(err[mask]).mean()) if mask.any() else 0.0
            y = tsus_target(self.tsus, t.reward, qn_high.get(i, zero))
            dh = float(q_high[i, int(a.high)] - y)
            g = self.gate(t, epoch)
            if g:
                l, d = huber(dh, delta)
                high_loss += w * float(l)
                d_high[i, int(a.high)] = w * float(d)
            prios.append(abs(dh) + push_abs)
        n = len(batch)
        grads = dual.backward_batch(cache, d_push / n, d_high / n)
        return grads, prios, push_loss / n, high_loss / n

    def step(self, buffer: PrioritizedBuffer, rng: Rng, epoch: int, beta: float) -> tuple:
        batch = buffer.sample(self.cfg.batch, rng, beta)
        grads, prios, lp, lh = self.batch_gradient(batch, epoch)
        if not (math.isfinite(lp) and math.isfinite(lh)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: push={lp} high={lh}")
        grads = clip_grad(grads, self.cfg.grad_clip)
        self.dual = self.opt.step(self.dual, grads)
        for (idx, _, _), p in zip(batch, prios):
            buffer.update_priority(idx, p)
        return lp, lh


def validate(dual: DualScorer, frozen: PickPlaceScorer, spec: TaskSpec, episodes: int, seed: int) -> dict:
    """Greedy rollouts on the validation stream."""
    recs = rollout(HierarchicalPolicy(dual, frozen), spec, episode_rngs(seed, episodes))
    n = len(recs)
    steps = sum(r.steps for r in recs)
    return {
        "val_success": 100.0 * sum(r.success for r in recs) / n,
        "val_length": steps / n,
        "val_progress": sum(r.progress for r in recs) / n,
        "val_push_frac": sum(r.pushes for r in recs) / max(steps, 1),
    }


def train_hrl(
    spec: TaskSpec,
    frozen: PickPlaceScorer,
    run: RunConfig,
    rng: Rng,
    use_seq: bool = True,
    use_tsus: bool = True,
    log_fh=None,
    history: Optional[list] = None,
    dump_dir: Optional[Path] = None,
) -> DualScorer:
    """Train the dual scorer against the frozen pick/place heads and return the
    checkpoint with the highest validation success rate so far.

    ``log_fh`` receives one record per training episode; ``history`` one dict per
    epoch (validation score and whether the checkpoint was kept).
    """
    if not frozen.frozen:
        raise ValueError("pick/place scorer must be frozen before HRL")
    cfg = run.train
    dual = DualScorer.init(run.scorer, split_rng(rng, "init"))
    learner = HRLLearner(dual, cfg, run.seq, run.tsus, use_seq, use_tsus)
    buffer = PrioritizedBuffer(cfg.buffer_capacity, cfg.per_alpha, cfg.per_beta_start, cfg.per_eps)
    env_rng = split_rng(rng, "env")
    explore_rng = split_rng(rng, "explore")
    replay_rng = split_rng(rng, "replay")
    eps_push = push_schedule(cfg)
    eps_high = high_schedule(cfg)
    beta = LinearSchedule(cfg.per_beta_start, cfg.per_beta_end, cfg.hrl_epochs)
    best, best_rate = learner.dual, -1.0

    for epoch in range(cfg.hrl_epochs):
        policy = HierarchicalPolicy(learner.dual, frozen, epsilon(eps_high, epoch), epsilon(eps_push, epoch))
        for ep in range(cfg.episodes_per_epoch):
            ep_rng = split_rng(env_rng, f"{epoch}-{ep}")
            act_rng = split_rng(explore_rng, f"{epoch}-{ep}")
            state = spec.build(ep_rng)
            steps = pushes = 0
            lp_sum = lh_sum = 0.0
            n_upd = 0
            for t_step in range(spec.max_steps):
                if spec.is_success(state):
                    break
                policy.dual = learner.dual
                obs = render(state)
                (action,) = policy.act_batch([state], [obs], [act_rng], t_step)
                out = execute(spec, state, action)
                r = stp_reward(action.high, out.progress_delta, out.push_success, out.pickplace_success)
                buffer.push(
                    Transition(obs, action, r, render(out.state), out.progress_delta, out.done, out.push_success, out.pickplace_success)
                )
                steps += 1
                pushes += action.high == HighAction.PUSH
                state = out.state
                if len(buffer) >= cfg.batch:
                    try:
                        lp, lh = learner.step(buffer, replay_rng, epoch, beta(epoch))
                    except TrainingDiverged:
                        if dump_dir is not None:
                            Path(dump_dir).mkdir(parents=True, exist_ok=True)
                            buffer.dump(Path(dump_dir) / "diverged_buffer.jsonl")
                        raise
                    lp_sum += lp
                    lh_sum += lh
                    n_upd += 1
                if out.done:
                    break
            if log_fh is not None:
                rec = {
                    "epoch": epoch,
                    "seed": cfg.train_seed,
                    "episode": ep,
                    "steps": steps,
                    "pushes": pushes,
                    "success": spec.is_success(state),
                    "progress": float(spec.progress(state)),
                    "push_loss": lp_sum / max(n_upd, 1),
                    "high_loss": lh_sum / max(n_upd, 1),
                }
                log_fh.write(dumps_record(rec) + "\n")
        val = validate(learner.dual, frozen, spec, cfg.validation_episodes, cfg.validation_seed)
        kept = val["val_success"] > best_rate
        if kept:
            best, best_rate = learner.dual, val["val_success"]
        if history is not None:
            history.append(dict(val, epoch=epoch, kept=kept))
        log.info(
            "epoch %d success=%.1f length=%.2f progress=%.3f push_frac=%.2f%s",
            epoch, val["val_success"], val["val_length"], val["val_progress"], val["val_push_frac"], " *" if kept else "",
        )
    return best


__all__ = [
    "TrainConfig",
    "TaskConfig",
    "RunConfig",
    "config_from_dict",
    "load_config",
    "LinearSchedule",
    "epsilon",
    "train_bc",
    "train_hrl",
    "bc_accuracy",
    "collect_demos",
    "HRLLearner",
    "TrainingDiverged",
    "validate",
]
