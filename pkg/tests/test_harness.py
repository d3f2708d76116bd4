import hashlib

import numpy as np
import pytest

from clutterhrl.core import Action, GridObservation, HighAction
from clutterhrl.harness.evaluate import EpisodeRecord, EvalReport, clutter_sweep, episode_rngs, evaluate, rollout
from clutterhrl.harness.policies import OraclePolicy, RandomPolicy
from clutterhrl.harness.render import Frame, read_frames, render_episode, trace_lines, write_frames
from clutterhrl.tasks import make_task

# Oracle rollout on a 6x6 insertion scene with two clutter blocks, seed 1.
GOLDEN_FIRST = (
    "step 0 PUSH (0, 1, 6)\n"
    "A  .  .  .  .  .\n"
    ".  .  .  g1 g2 .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
)
GOLDEN_LAST = (
    "step 7\n"
    "21 .  .  .  .  g1\n"
    ".  .  .  g1 .  .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
    ".  .  .  .  .  .\n"
)
GOLDEN_PPM_SHA = "014fcd6273f15f1585ed25b397ef1eb428f3a26bb15bed0cd29cb314d2557ce0"


def _golden_trace():
    spec = make_task("block-insertion", 6, 6, 2)
    (rec,) = rollout(OraclePolicy(spec), spec, episode_rngs(1, 1), keep_trace=True)
    return rec


def test_oracle_solves_uncluttered_insertion_in_one_step():
    spec = make_task("block-insertion")
    report = evaluate(OraclePolicy(spec), spec, 100, 3, n_additional=0)
    assert report.success_rate == 100.0
    assert report.avg_episode_length == 1.0


def test_random_policy_fails_pyramid():
    spec = make_task("stack-block-pyramid")
    report = evaluate(RandomPolicy(), spec, 40, 0)
    assert report.success_rate < 5.0
    assert report.avg_episode_length == pytest.approx(spec.max_steps, abs=0.5)


def test_report_arithmetic_counts_failures_at_full_length():
    recs = [EpisodeRecord(0, 3, 1, True, 1.0, 1.0), EpisodeRecord(1, 20, 9, False, 0.5, 0.0)]
    report = EvalReport.from_records("t", recs, policy="p", n_additional=6)
    assert report.success_rate == 50.0
    assert report.avg_episode_length == 11.5
    head, *rest = report.to_lines()
    assert '"type":"report"' in head.replace(" ", "") and len(rest) == 2
    assert "success_rate=50.0%" in report.text()


def test_evaluation_is_reproducible_and_batch_independent():
    spec = make_task("stack-block-pyramid", 8, 8, 2)
    a = evaluate(RandomPolicy(), spec, 6, 9)
    b = evaluate(RandomPolicy(), spec, 6, 9)
    assert a.to_lines() == b.to_lines()
    # Episode i depends only on (seed, i): a shorter run reproduces the prefix.
    c = evaluate(RandomPolicy(), spec, 3, 9)
    assert c.to_lines()[1:] == a.to_lines()[1:4]


def test_sweep_reports_each_count():
    spec = make_task("block-insertion", 8, 8)
    reports = clutter_sweep(OraclePolicy(spec), spec, [0, 2, 4], 5, 1)
    assert [r.n_additional for r in reports] == [0, 2, 4]
    assert reports[0].success_rate == 100.0


def test_golden_frames():
    rec = _golden_trace()
    frames = render_episode(trace_lines(0, rec.trace))
    assert len(frames) == rec.steps + 1 == 8
    assert frames[0].ascii() == GOLDEN_FIRST
    assert frames[-1].ascii() == GOLDEN_LAST
    assert hashlib.sha256(frames[0].ppm()).hexdigest() == GOLDEN_PPM_SHA


def test_ppm_header_and_size():
    obs = GridObservation(np.zeros((3, 5), int), np.zeros((3, 5), int), np.zeros((3, 5), int))
    data = Frame(0, obs, None).ppm()
    head = b"P6\n40 24\n255\n"
    assert data.startswith(head) and len(data) == len(head) + 40 * 24 * 3


def test_episode_already_solved_renders_one_frame():
    obs = GridObservation(np.zeros((2, 2), int), np.zeros((2, 2), int), np.zeros((2, 2), int))
    frames = render_episode(trace_lines(4, [(obs, None)]), episode=4)
    assert len(frames) == 1 and frames[0].ascii().startswith("step 0\n")


def test_corrupt_line_is_reported_by_number():
    lines = trace_lines(0, _golden_trace().trace)
    lines[2] = lines[2][:40]
    with pytest.raises(ValueError, match="line 3"):
        render_episode(lines)


def test_out_of_order_steps_rejected():
    lines = trace_lines(0, _golden_trace().trace)
    with pytest.raises(ValueError, match="line 1: expected step 0"):
        read_frames(lines[1:])


def test_missing_episode_rejected():
    with pytest.raises(ValueError, match="no frames"):
        render_episode(trace_lines(0, _golden_trace().trace), episode=3)


def test_write_frames(tmp_path):
    frames = render_episode(trace_lines(0, _golden_trace().trace))
    write_frames(frames, tmp_path)
    assert len(list(tmp_path.glob("*.txt"))) == len(list(tmp_path.glob("*.ppm"))) == 8
    assert (tmp_path / "frame_000.txt").read_text() == GOLDEN_FIRST


def test_pickplace_header_shows_place():
    obs = GridObservation(np.zeros((1, 2), int), np.zeros((1, 2), int), np.zeros((1, 2), int))
    text = Frame(1, obs, Action(HighAction.PICKPLACE, (0, 0, 0), (1, 0, 0))).ascii()
    assert text.splitlines()[0] == "step 1 PICKPLACE (0, 0, 0) -> (1, 0, 0)"
