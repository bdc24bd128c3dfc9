"""Chunked, seeded path simulation with worker-count invariant output."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Dict, Iterator, List, Optional, Tuple, TypeVar

import numpy as np
from tqdm import tqdm

from .config import Config
from .errors import UsageError

logger = logging.getLogger(__name__)

R = TypeVar("R")
ChunkFn = Callable[[np.random.Generator, int, int], R]


class StreamTag(IntEnum):
    """Independent RNG stream families; each simulator draws from its own."""

    DRIVER = 1
    GENERIC_SV = 2
    AFFINE = 3
    GBM = 4
    BESSEL = 5
    LEVEL = 6
    BOOTSTRAP = 7
    BESSEL_SUP = 8


def chunk_rng(seed: int, stream: int, chunk_index: int) -> np.random.Generator:
    """Generator for one chunk, a pure function of (seed, stream, chunk index)."""
    sequence = np.random.SeedSequence([seed, int(stream), chunk_index])
    return np.random.default_rng(sequence)


@dataclass
class SimulationParams:
    n_paths: int
    seed: int
    n_workers: int = Config.WORKERS
    chunk_size: int = Config.CHUNK_SIZE
    progress: bool = False
    desc: str = "Simulating paths"

    def __post_init__(self):
        if self.n_paths < 1:
            raise UsageError(f"n_paths must be positive, got {self.n_paths}")
        if self.chunk_size < 1:
            raise UsageError(f"chunk_size must be positive, got {self.chunk_size}")
        self.n_workers = max(1, int(self.n_workers or 1))


class PathSimulation:
    """Runs a per-chunk function over a fixed chunk layout.

    Path i always belongs to chunk i // chunk_size and each chunk draws from its
    own generator, so results never depend on the number of workers. Results are
    yielded in chunk order.
    """

    def __init__(self, params: SimulationParams, stream: StreamTag):
        self.params = params
        self.stream = stream

    def layout(self) -> List[Tuple[int, int]]:
        full, rest = divmod(self.params.n_paths, self.params.chunk_size)
        sizes = [self.params.chunk_size] * full + ([rest] if rest else [])
        return list(enumerate(sizes))

    def _run_chunk(self, fn: ChunkFn, index: int, size: int):
        return fn(chunk_rng(self.params.seed, self.stream, index), size, index)

    def imap(self, fn: ChunkFn) -> Iterator[R]:
        """Yield fn(rng, chunk_size, chunk_index) for every chunk, in order."""
        layout = self.layout()
        workers = self.params.n_workers
        logger.debug(
            "stream %s: %d paths in %d chunks on %d workers",
            self.stream.name,
            self.params.n_paths,
            len(layout),
            workers,
        )
        with tqdm(
            total=len(layout), desc=self.params.desc, disable=not self.params.progress
        ) as pbar:
            if workers == 1:
                for index, size in layout:
                    yield self._run_chunk(fn, index, size)
                    pbar.update(1)
                return

            # bounded window keeps memory at a few chunks per worker
            window = 2 * workers
            with ThreadPoolExecutor(max_workers=workers) as pool:
                pending = []
                for index, size in layout:
                    pending.append(pool.submit(self._run_chunk, fn, index, size))
                    if len(pending) >= window:
                        yield pending.pop(0).result()
                        pbar.update(1)
                for future in pending:
                    yield future.result()
                    pbar.update(1)

    def collect(
        self, fn: Callable[..., Dict[str, np.ndarray]]
    ) -> Dict[str, np.ndarray]:
        """Concatenate per-chunk dicts of per-path arrays in chunk order."""
        parts: Dict[str, list] = {}
        for record in self.imap(fn):
            for key, value in record.items():
                parts.setdefault(key, []).append(np.asarray(value))
        return {key: np.concatenate(values) for key, values in parts.items()}


@dataclass
class RunOptions:
    """Execution knobs shared by every simulator entry point."""

    n_workers: Optional[int] = None
    chunk_size: int = Config.CHUNK_SIZE
    progress: bool = False

    def params(self, n_paths: int, seed: int, desc: str) -> SimulationParams:
        return SimulationParams(
            n_paths=n_paths,
            seed=seed,
            n_workers=self.n_workers or Config.WORKERS,
            chunk_size=self.chunk_size,
            progress=self.progress,
            desc=desc,
        )


def simulation(
    n_paths: int,
    seed: int,
    stream: StreamTag,
    options: Optional[RunOptions] = None,
    desc: str = "",
) -> PathSimulation:
    options = options or RunOptions()
    desc = desc or f"{stream.name.lower()} paths"
    return PathSimulation(options.params(n_paths, seed, desc), stream)
