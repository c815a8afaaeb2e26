"""Small shared helpers: deterministic parallel mapping, thread resolution."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "SDIDML_THREADS"


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map a pure function over items, optionally with a thread pool.

    Results are always returned in input order, so reductions downstream are
    deterministic regardless of the thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def resolve_threads(requested: int | None) -> int:
    """CLI --threads value, else the SDIDML_THREADS env var, else 1."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1
