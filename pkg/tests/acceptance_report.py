"""Collects one pass/fail line per acceptance criterion."""

import time
from contextlib import contextmanager

RESULTS = {}


@contextmanager
def criterion(number: int, title: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number:2d} FAIL  {title}  ({time.perf_counter() - t0:.1f}s): {type(exc).__name__}: {exc}"
        RESULTS[number] = line.splitlines()[0]
        print(RESULTS[number])
        raise
    RESULTS[number] = f"criterion {number:2d} PASS  {title}  ({time.perf_counter() - t0:.1f}s)"
    print(RESULTS[number])
