"""Collects one verdict per acceptance criterion; conftest prints them after the run."""

from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

RESULTS: dict[int, str] = {}


def _line(n: int, title: str, ok: bool, seconds: float, budget: float, detail: str) -> str:
    verdict = "PASS" if ok else "FAIL"
    return f"criterion {n:2d} {verdict}  {title}  [{seconds:.1f}s / budget {budget:.0f}s]  {detail}".rstrip()


@contextmanager
def criterion(n: int, title: str, budget: float):
    """Time the block, record PASS/FAIL, and fail the test when it overruns ``budget`` seconds.

    The block may fill ``info["detail"]`` with a short measurement summary.
    """
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        RESULTS[n] = _line(n, title, False, time.perf_counter() - t0, budget, f"{info['detail']} ({msg[:160]})")
        print(RESULTS[n])
        raise
    dt = time.perf_counter() - t0
    ok = dt < budget
    RESULTS[n] = _line(n, title, ok, dt, budget, info["detail"] + ("" if ok else " (over time budget)"))
    print(RESULTS[n])
    if not ok:
        pytest.fail(f"criterion {n} took {dt:.1f}s, budget {budget:.0f}s")
