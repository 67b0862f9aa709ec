"""Thread-count resolution and ordered chunk-parallel execution."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

from .errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "ROSE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(value: Optional[int] = None) -> int:
    """Explicit value, else $ROSE_THREADS, else 1."""
    if value is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        if not raw:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return int(value)


def chunk_ranges(n: int, size: int) -> List[range]:
    """Consecutive index ranges of at most ``size``; independent of thread count."""
    if size < 1:
        raise ConfigError(f"chunk size must be >= 1, got {size}")
    return [range(start, min(start + size, n)) for start in range(0, n, size)]


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """``[fn(x) for x in items]``, run on a thread pool when ``threads > 1``.

    Results come back in input order regardless of scheduling.
    """
    items: Sequence[T] = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(threads, len(items))
    logger.debug("ordered_map: %d chunk(s) on %d thread(s)", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
