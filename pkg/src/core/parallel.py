"""
Path-range parallelism.

Work is split into fixed path ranges and results are concatenated in range
order, so the output never depends on the worker count or on completion
order.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from src.observability.settings import get_settings

T = TypeVar("T")

PathRange = Tuple[int, int]


def path_ranges(paths: int, chunk: int) -> List[PathRange]:
    """Split [0, paths) into consecutive ranges of at most `chunk` paths."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    return [(start, min(start + chunk, paths)) for start in range(0, paths, chunk)]


def map_ranges(func: Callable[[PathRange], T], ranges: Sequence[PathRange],
               workers: Optional[int] = None) -> List[T]:
    """Apply `func` to every range; results come back in range order."""
    workers = workers or get_settings().workers
    if workers <= 1 or len(ranges) <= 1:
        return [func(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, ranges))
