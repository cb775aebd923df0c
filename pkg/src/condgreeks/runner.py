"""Replication blocks, stream assignment and the worker pool.

Replications are cut into fixed-size blocks; block ``b`` always draws from
``RngStream(master_seed, b, namespace)``. Results are merged in block order,
so the output depends on (seed, N, block_size) but not on the number of
workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

from .sde import RngStream

T = TypeVar("T")

DEFAULT_BLOCK = 25_000


def block_sizes(N: int, block_size: int = DEFAULT_BLOCK) -> list[int]:
    N = int(N)
    if N <= 0:
        return []
    full, rest = divmod(N, block_size)
    return [block_size] * full + ([rest] if rest else [])


def run_blocks(
    fn: Callable[[RngStream, int], T],
    N: int,
    master_seed: int,
    namespace: tuple[int, ...] = (),
    block_size: int = DEFAULT_BLOCK,
    workers: int = 1,
) -> list[T]:
    """Evaluate ``fn(stream, n)`` for every block, returning results in block order."""
    sizes = block_sizes(N, block_size)
    streams = [RngStream(master_seed, b, tuple(namespace)) for b in range(len(sizes))]
    if workers <= 1 or len(sizes) <= 1:
        return [fn(s, n) for s, n in zip(streams, sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, streams, sizes))
