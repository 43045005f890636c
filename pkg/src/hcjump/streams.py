"""Counter-based random streams keyed by (seed, path index).

Each path draws from Philox with key (seed, index) and counter zero, so a
path's randomness does not depend on which worker runs it or in what order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

ENV_THREADS = "HCJUMP_THREADS"


def default_threads():
    try:
        return max(1, int(os.environ.get(ENV_THREADS, "1")))
    except ValueError:
        return 1


class PathStream:
    """One reusable Generator whose Philox state is rewound per path."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.bit_generator = np.random.Philox(key=self.seed)
        self.generator = np.random.Generator(self.bit_generator)
        self._state = self.bit_generator.state

    def at(self, index: int) -> np.random.Generator:
        st = self._state
        st["state"]["key"][0] = self.seed
        st["state"]["key"][1] = int(index)
        st["state"]["counter"][:] = 0
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self.bit_generator.state = st
        return self.generator


def path_rng(seed: int, index: int) -> np.random.Generator:
    """A fresh Generator for (seed, index); equivalent to PathStream(seed).at(index)."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def run_paths(n_paths: int, seed: int, work, threads: int | None = None, chunk: int = 256):
    """Call work(stream, start, stop) over contiguous index chunks.

    Results are returned in index order so reductions are independent of the
    number of workers.
    """
    threads = threads or default_threads()
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        stream = PathStream(seed)
        return [work(stream, a, b) for a, b in bounds]
    streams = [PathStream(seed) for _ in range(threads)]
    groups = [bounds[k::threads] for k in range(threads)]

    def run_group(k):
        return [(a, work(streams[k], a, b)) for a, b in groups[k]]

    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(run_group, range(threads)))
    merged = sorted((item for part in parts for item in part), key=lambda t: t[0])
    return [r for _, r in merged]
