"""Command-line entry point.

Every command reads the same run config (``--config``), writes under ``--out`` into
``checkpoints/``, ``logs/``, ``reports/`` and ``frames/``, and is deterministic given
the config and seed. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from ..core import Rng, dumps_record, split_rng
from ..scorer import DualScorer, PickPlaceScorer, load_checkpoint, save_checkpoint
from ..tasks import TASK_NAMES, load_demos, run_oracle_episode, save_demos
from ..trainer import RunConfig, TrainingDiverged, config_from_dict, load_config, train_bc, train_hrl
from .evaluate import clutter_sweep, evaluate
from .policies import AlternatingPolicy, HierarchicalPolicy, OraclePolicy, PickPlaceOnlyPolicy, PolicyVariant, RandomPolicy
from .render import render_episode, trace_lines, write_frames

log = logging.getLogger("clutterhrl")

HRL_VARIANTS = [v.value for v in PolicyVariant if v.trains_hrl]
POLICIES = HRL_VARIANTS + ["pick-place-only", "pick-place-random-push", "alternating", "random", "oracle"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON run config; unknown keys are rejected")
    p.add_argument("--seed", type=int, help="training seed for train commands, test seed for evaluation")
    p.add_argument("--task", choices=TASK_NAMES, help="override the config's task name")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    return p


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=POLICIES, default="hclm")
    p.add_argument("--episodes", type=int, help="episode count (default: the config's validation_episodes)")
    p.add_argument("--dual", type=Path, help="dual scorer checkpoint (default: checkpoints/dual-<policy>.ckpt)")
    p.add_argument("--pickplace", type=Path, help="pick/place checkpoint (default: checkpoints/pickplace.ckpt)")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="clutterhrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-demos", parents=[common], help="write oracle demonstrations")
    p.add_argument("--episodes", type=int, help="demo episodes (default: the config's demo_count)")

    p = sub.add_parser("train-bc", parents=[common], help="behaviour-clone the pick/place heads")
    p.add_argument("--demos", type=Path, help="demo file (default: logs/demos.jsonl, generated when absent)")

    p = sub.add_parser("train-hrl", parents=[common], help="train the dual scorer")
    p.add_argument("--variant", choices=HRL_VARIANTS, default="hclm")
    p.add_argument("--pickplace", type=Path, help="frozen pick/place checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate a policy")
    _policy_flags(p)
    p.add_argument("--n-additional", type=int, help="clutter count (default: the task's)")
    p.add_argument("--trace", action="store_true", help="also write a per-step trace log for rendering")

    p = sub.add_parser("sweep", parents=[common], help="evaluate one policy across clutter counts")
    _policy_flags(p)
    p.add_argument("--counts", default="6,8,10,12", help="comma-separated clutter counts")

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate one HRL variant")
    p.add_argument("--variant", choices=HRL_VARIANTS, default="no-tsus")
    p.add_argument("--episodes", type=int, help="test episodes (default: the config's validation_episodes)")

    p = sub.add_parser("render", parents=[common], help="render a trace log to frames")
    p.add_argument("--log", type=Path, required=True, help="trace log written by 'eval --trace'")
    p.add_argument("--episode", type=int, default=0)
    return parser


# ---------------------------------------------------------------- helpers


def _run_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            run = load_config(args.config)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from exc
    else:
        run = config_from_dict({})
    if args.task is not None:
        run = replace(run, task=replace(run.task, name=args.task))
    if args.seed is not None and args.command in ("gen-demos", "train-bc", "train-hrl", "ablate"):
        run = replace(run, train=replace(run.train, train_seed=args.seed))
    return run


def _dirs(out: Path) -> dict:
    d = {name: out / name for name in ("checkpoints", "logs", "reports", "frames")}
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    return d


def _write_lines(path: Path, lines) -> None:
    path.write_text("".join(line + "\n" for line in lines))


def _load_scorer(path: Path, kind, cfg) -> object:
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    scorer, _ = load_checkpoint(path)
    if not isinstance(scorer, kind):
        raise ValueError(f"{path}: expected a {kind.kind} checkpoint, found {scorer.kind}")
    if scorer.cfg != cfg:
        raise ValueError(f"{path}: checkpoint/config mismatch (scorer settings differ from the run config)")
    return scorer


def _pickplace(args, run, dirs) -> PickPlaceScorer:
    path = args.pickplace or dirs["checkpoints"] / "pickplace.ckpt"
    pp = _load_scorer(path, PickPlaceScorer, run.pickplace)
    return pp if pp.frozen else pp.freeze()


def _make_policy(name: str, args, run, dirs):
    if name == "random":
        return RandomPolicy(run.scorer.k_push)
    if name == "oracle":
        return OraclePolicy(run.task.make(), run.scorer.k_push)
    pp = _pickplace(args, run, dirs)
    if name == "pick-place-only":
        return PickPlaceOnlyPolicy(pp)
    if name == "pick-place-random-push":
        return AlternatingPolicy(pp, None, run.scorer.k_push)
    dual_name = "hclm" if name == "alternating" else name
    dual = _load_scorer(args.dual or dirs["checkpoints"] / f"dual-{dual_name}.ckpt", DualScorer, run.scorer)
    if name == "alternating":
        return AlternatingPolicy(pp, dual)
    policy = HierarchicalPolicy(dual, pp)
    policy.name = name
    return policy


def _demos(args, dirs) -> Optional[list]:
    path = getattr(args, "demos", None) or dirs["logs"] / "demos.jsonl"
    if path.is_file():
        return load_demos(path)
    if getattr(args, "demos", None) is not None:
        raise FileNotFoundError(f"demo file not found: {path}")
    return None


def _gen_demo_episodes(spec, count: int, seed: int) -> list:
    base = split_rng(Rng(seed), "demos")
    episodes = []
    for i in range(count):
        ep = run_oracle_episode(spec, split_rng(base, f"demo-{i}"))
        if ep.stalled:
            log.warning("oracle stalled in demo episode %d; skipped", i)
            continue
        episodes.append(ep)
    return episodes


def _train_bc(args, run, dirs) -> PickPlaceScorer:
    spec = run.task.make()
    hist: list = []
    pp = train_bc(spec, run.train, Rng(run.train.train_seed), run.pickplace, demos=_demos(args, dirs), history=hist)
    best = max((h["val_acc"] for h in hist), default=None)
    save_checkpoint(pp, dirs["checkpoints"] / "pickplace.ckpt", {"task": spec.name, "val_acc": best, "config": run.to_dict()})
    _write_lines(dirs["logs"] / "bc.jsonl", (dumps_record(h) for h in hist))
    return pp


def _train_hrl(variant: str, pp: PickPlaceScorer, run, dirs) -> DualScorer:
    v = PolicyVariant(variant)
    spec = run.task.make()
    hist: list = []
    with open(dirs["logs"] / f"hrl-{variant}.jsonl", "w") as fh:
        dual = train_hrl(
            spec, pp, run, Rng(run.train.train_seed), v.use_seq, v.use_tsus, log_fh=fh, history=hist, dump_dir=dirs["logs"]
        )
    _write_lines(dirs["logs"] / f"hrl-{variant}-val.jsonl", (dumps_record(h) for h in hist))
    kept = [h for h in hist if h["kept"]]
    extra = {"variant": variant, "task": spec.name, "config": run.to_dict()}
    if kept:
        extra.update(epoch=kept[-1]["epoch"], val_success=kept[-1]["val_success"])
    save_checkpoint(dual, dirs["checkpoints"] / f"dual-{variant}.ckpt", extra)
    return dual


def _eval_seed(args, run) -> int:
    return run.train.test_seed if args.seed is None else args.seed


def _episodes(args, run) -> int:
    n = run.train.validation_episodes if args.episodes is None else args.episodes
    if n < 1:
        raise UsageError("--episodes must be positive")
    return n


# ---------------------------------------------------------------- commands


def cmd_gen_demos(args, run, dirs) -> None:
    count = run.train.demo_count if args.episodes is None else args.episodes
    if count < 0:
        raise UsageError("--episodes must be non-negative")
    episodes = _gen_demo_episodes(run.task.make(), count, run.train.train_seed)
    save_demos(episodes, dirs["logs"] / "demos.jsonl")
    print(f"demos={len(episodes)} samples={sum(len(e.steps) for e in episodes)} path={dirs['logs'] / 'demos.jsonl'}")


def cmd_train_bc(args, run, dirs) -> None:
    _train_bc(args, run, dirs)
    hist = [json.loads(line) for line in (dirs["logs"] / "bc.jsonl").read_text().splitlines()]
    last = hist[-1] if hist else {}
    print(f"bc epochs={len(hist)} train_acc={last.get('train_acc', 0.0):.3f} best_val_acc={max((h['val_acc'] for h in hist), default=0.0):.3f}")


def cmd_train_hrl(args, run, dirs) -> None:
    pp = _pickplace(args, run, dirs)
    _train_hrl(args.variant, pp, run, dirs)
    hist = [json.loads(line) for line in (dirs["logs"] / f"hrl-{args.variant}-val.jsonl").read_text().splitlines()]
    best = max((h["val_success"] for h in hist), default=0.0)
    print(f"hrl variant={args.variant} epochs={len(hist)} best_val_success={best:.1f}%")


def cmd_eval(args, run, dirs) -> None:
    policy = _make_policy(args.policy, args, run, dirs)
    report = evaluate(policy, run.task.make(), _episodes(args, run), _eval_seed(args, run), args.n_additional, keep_trace=args.trace)
    _write_lines(dirs["reports"] / f"eval-{args.policy}.jsonl", report.to_lines())
    if args.trace:
        lines = []
        for rec in report.records:
            lines.extend(trace_lines(rec.episode, rec.trace))
        _write_lines(dirs["logs"] / f"trace-{args.policy}.jsonl", lines)
    print(report.text())


def cmd_sweep(args, run, dirs) -> None:
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --counts {args.counts!r}") from exc
    if not counts or min(counts) < 0:
        raise UsageError("--counts needs non-negative integers")
    policy = _make_policy(args.policy, args, run, dirs)
    reports = clutter_sweep(policy, run.task.make(), counts, _episodes(args, run), _eval_seed(args, run))
    _write_lines(dirs["reports"] / f"sweep-{args.policy}.jsonl", [line for r in reports for line in r.to_lines()])
    for r in reports:
        print(r.text())


def cmd_ablate(args, run, dirs) -> None:
    pp_path = dirs["checkpoints"] / "pickplace.ckpt"
    pp = _load_scorer(pp_path, PickPlaceScorer, run.pickplace).freeze() if pp_path.is_file() else _train_bc(args, run, dirs)
    dual = _train_hrl(args.variant, pp, run, dirs)
    policy = HierarchicalPolicy(dual, pp)
    policy.name = args.variant
    report = evaluate(policy, run.task.make(), _episodes(args, run), run.train.test_seed)
    _write_lines(dirs["reports"] / f"ablate-{args.variant}.jsonl", report.to_lines())
    print(report.text())


def cmd_render(args, run, dirs) -> None:
    if not args.log.is_file():
        raise FileNotFoundError(f"log not found: {args.log}")
    with open(args.log) as fh:
        frames = render_episode(fh, args.episode)
    out = dirs["frames"] / f"{args.log.stem}-ep{args.episode}"
    write_frames(frames, out)
    print(f"frames={len(frames)} dir={out}")


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-bc": cmd_train_bc,
    "train-hrl": cmd_train_hrl,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run = _run_config(args)
        dirs = _dirs(args.out)
        COMMANDS[args.command](args, run, dirs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"clutterhrl: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, TrainingDiverged) as exc:
        print(f"clutterhrl: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
