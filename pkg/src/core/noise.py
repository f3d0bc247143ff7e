"""
pomp-core - Noise Engine
========================

Uniform time grids and reproducible driving noise under the reference
measure: Brownian increments for W and Y and per-step Poisson counts for
each jump mark.

Generation is counter-based: paths are grouped into fixed blocks of
NOISE_BLOCK_PATHS rows and every (seed, stream, block) triple keys its own
Philox generator whose counter advances along the time steps. A path's
increments therefore depend only on (seed, path index, stream), never on
how many paths were requested, in which order blocks were generated, or on
the worker count.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from src.core.parallel import map_ranges, path_ranges
from src.data.exceptions import GridError, NoiseFormatError
from src.data.problem_model import MarkSpace
from src.observability.tracing import trace_operation

logger = logging.getLogger("pomp.noise")

NOISE_BLOCK_PATHS = 4096
NOISE_FORMAT = "pomp-noise"
NOISE_FORMAT_VERSION = 1

STREAM_W = 0
STREAM_Y = 1
STREAM_MARK_OFFSET = 2


# =============================================================================
# TIME GRID
# =============================================================================

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_0 = 0 < ... < t_N = T."""
    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise GridError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise GridError(f"step count N must be an integer >= 1, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, step: int) -> float:
        return step * self.dt


def make_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(T=float(T), N=N)


# =============================================================================
# NOISE BUNDLE
# =============================================================================

@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """
    Increments on a grid for `path_count` paths.

    dW, dY: (paths, N) Gaussian increments with variance dt
    jump_counts: (paths, N, M) Poisson counts with mean nu_i dt
    """
    dW: np.ndarray
    dY: np.ndarray
    jump_counts: np.ndarray
    seed: int
    grid: TimeGrid
    nu: Tuple[float, ...]

    def __post_init__(self):
        for arr in (self.dW, self.dY, self.jump_counts):
            arr.flags.writeable = False

    @property
    def path_count(self) -> int:
        return self.dW.shape[0]

    @property
    def M(self) -> int:
        return self.jump_counts.shape[2]

    def compensated_jumps(self) -> np.ndarray:
        """Counts minus compensator nu_i dt, shape (paths, N, M)."""
        return self.jump_counts - np.asarray(self.nu) * self.grid.dt

    def slice(self, start: int, stop: int) -> "NoiseBundle":
        return NoiseBundle(
            dW=self.dW[start:stop], dY=self.dY[start:stop],
            jump_counts=self.jump_counts[start:stop],
            seed=self.seed, grid=self.grid, nu=self.nu,
        )

    def header(self) -> dict:
        return {
            "format": NOISE_FORMAT,
            "version": NOISE_FORMAT_VERSION,
            "seed": self.seed,
            "T": self.grid.T,
            "N": self.grid.N,
            "paths": self.path_count,
            "M": self.M,
            "nu": list(self.nu),
        }


def _stream_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = np.random.SeedSequence(entropy=seed, spawn_key=(stream, block)).generate_state(
        2, dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise_block(grid: TimeGrid, nu: np.ndarray, seed: int, block: int,
                       rows: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First `rows` paths of path block `block`."""
    sqrt_dt = np.sqrt(grid.dt)
    dW = _stream_generator(seed, STREAM_W, block).standard_normal((rows, grid.N)) * sqrt_dt
    dY = _stream_generator(seed, STREAM_Y, block).standard_normal((rows, grid.N)) * sqrt_dt
    counts = np.zeros((rows, grid.N, len(nu)), dtype=np.int64)
    for i, weight in enumerate(nu):
        if weight > 0:
            gen = _stream_generator(seed, STREAM_MARK_OFFSET + i, block)
            counts[:, :, i] = gen.poisson(weight * grid.dt, size=(rows, grid.N))
    return dW, dY, counts


def _check_seed(seed: int) -> int:
    if int(seed) != seed or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    return int(seed)


@trace_operation("sample_noise")
def sample_noise(grid: TimeGrid, mark_space: MarkSpace, paths: int, seed: int,
                 workers: Optional[int] = None) -> NoiseBundle:
    if paths < 1:
        raise ValueError(f"paths must be >= 1, got {paths}")
    seed = _check_seed(seed)
    nu = mark_space.nu

    def generate(block_range):
        start, stop = block_range
        return sample_noise_block(grid, nu, seed, start // NOISE_BLOCK_PATHS, stop - start)

    parts = map_ranges(generate, path_ranges(paths, NOISE_BLOCK_PATHS), workers)
    bundle = NoiseBundle(
        dW=np.concatenate([p[0] for p in parts]),
        dY=np.concatenate([p[1] for p in parts]),
        jump_counts=np.concatenate([p[2] for p in parts]),
        seed=seed, grid=grid, nu=tuple(float(v) for v in nu),
    )
    logger.debug(
        "Noise sampled",
        extra={"event_type": "noise", "paths": paths, "steps": grid.N, "marks": len(nu)},
    )
    return bundle


def regenerate_path(grid: TimeGrid, mark_space: MarkSpace, seed: int,
                    path_index: int) -> NoiseBundle:
    """Rebuild a single path without generating the others."""
    seed = _check_seed(seed)
    block, offset = divmod(path_index, NOISE_BLOCK_PATHS)
    dW, dY, counts = sample_noise_block(grid, mark_space.nu, seed, block, offset + 1)
    return NoiseBundle(
        dW=dW[offset:], dY=dY[offset:], jump_counts=counts[offset:],
        seed=seed, grid=grid, nu=tuple(float(v) for v in mark_space.nu),
    )


# =============================================================================
# DUMP / LOAD
# =============================================================================

def dump_noise(bundle: NoiseBundle, path: Union[str, Path]) -> None:
    """Write a versioned binary baseline (.npz)."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(bundle.header(), sort_keys=True)),
            dW=bundle.dW, dY=bundle.dY, jump_counts=bundle.jump_counts,
        )


def load_noise(path: Union[str, Path]) -> NoiseBundle:
    with np.load(path, allow_pickle=False) as data:
        try:
            header = json.loads(str(data["header"]))
        except (KeyError, ValueError) as e:
            raise NoiseFormatError(f"{path}: missing or unreadable header") from e
        if header.get("format") != NOISE_FORMAT or header.get("version") != NOISE_FORMAT_VERSION:
            raise NoiseFormatError(
                f"{path}: unsupported noise format {header.get('format')} v{header.get('version')}"
            )
        dW, dY, counts = data["dW"], data["dY"], data["jump_counts"]

    expected = (header["paths"], header["N"])
    if dW.shape != expected or dY.shape != expected or counts.shape != expected + (header["M"],):
        raise NoiseFormatError(f"{path}: array shapes disagree with header {header}")
    return NoiseBundle(
        dW=dW, dY=dY, jump_counts=counts, seed=header["seed"],
        grid=make_grid(header["T"], header["N"]), nu=tuple(header["nu"]),
    )
