"""Fan-out helper for ensemble work.

Work is split into fixed-size chunks of trajectory indices. The chunking
does not depend on the worker count, so results are identical whether the
chunks run in one process or many.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

THREADS_ENV = "DECOLAB_THREADS"
DEFAULT_CHUNK = 256


def resolve_workers(requested: int | None = None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    if requested is None:
        return 1
    return max(1, int(requested))


def chunk_ranges(n_items: int, chunk: int = DEFAULT_CHUNK) -> list[range]:
    chunk = max(1, int(chunk))
    return [range(start, min(start + chunk, n_items)) for start in range(0, n_items, chunk)]


def run_chunks(fn: Callable, tasks: Sequence, workers: int | None = None) -> list:
    """Evaluate ``fn(task)`` for each task, preserving order."""
    n = resolve_workers(workers)
    if n == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(n, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
