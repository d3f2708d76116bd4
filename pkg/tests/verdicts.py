"""PASS/FAIL lines collected by the acceptance suite and printed after the run."""

RESULTS: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    RESULTS[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
