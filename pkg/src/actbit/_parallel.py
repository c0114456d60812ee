from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count(default: int | None = None) -> int:
    raw = os.environ.get("ACTBIT_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"ACTBIT_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return default or min(8, os.cpu_count() or 1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """``list(map(fn, items))`` on a thread pool; output order follows input order."""
    items = list(items)
    workers = workers or worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
