"""Ordered process-pool map used by the per-frame stages."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Sequence[T] | Iterable[T], jobs: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally across ``jobs`` processes.

    Results come back in input order, so downstream reductions see the same
    sequence for any ``jobs``. ``fn`` must be picklable when ``jobs > 1``.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
