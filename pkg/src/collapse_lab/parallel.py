"""Seeded block-parallel evaluation with ordered reduction."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def block_rngs(seed: int, n_blocks: int) -> list[np.random.Generator]:
    """One independent generator per block, derived from the root seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_blocks)]


def block_map(fn, seed: int, n_blocks: int, threads: int = 1) -> list:
    """Run fn(block_index, rng) for every block; results come back in block order.

    The block split depends only on n_blocks, never on threads, so the output is
    identical for any worker count.
    """
    rngs = block_rngs(seed, n_blocks)
    jobs = list(range(n_blocks))
    if threads <= 1:
        return [fn(i, rngs[i]) for i in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda i: fn(i, rngs[i]), jobs))


def ordered_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))
