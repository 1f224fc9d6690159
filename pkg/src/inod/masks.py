"""Random binary noise masks at the canonical (granularity) resolution.

A mask cell stands for an s x s pixel patch of the input crop, where the
stride s is the granularity. Masks are grown by stamping rescaled random
3x3 seed patterns at random positions until the noise quantity reaches the
configured window; the last stamp is trimmed cell by cell if it overshoots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError
from .tensor import nn_resize

__all__ = [
    "GRANULARITY_STRIDES",
    "MaskGenConfig",
    "NoiseMask",
    "gen_sample_mask",
    "gen_noise_mask",
    "mask_fraction",
]

GRANULARITY_STRIDES = (4, 8, 16, 32)

# probability of a 1 in each cell of a 3x3 seed pattern
_SAMPLE_P1 = 2.0 / 3.0

# bail-out for degenerate configs where random stamping cannot make progress
_MAX_PLACEMENTS = 100_000


@dataclass(frozen=True)
class MaskGenConfig:
    """Everything gen_noise_mask needs; two configs with equal fields yield equal masks."""

    crop_h: int
    crop_w: int
    stride: int
    target_fraction: float
    tolerance: float = 0.02
    seed: int = 0
    scale_sampling: str = "interval"  # "interval" or "endpoints"

    def __post_init__(self):
        if self.stride not in GRANULARITY_STRIDES:
            raise ConfigError(f"stride must be one of {GRANULARITY_STRIDES}, got {self.stride}")
        if self.crop_h % self.stride or self.crop_w % self.stride:
            raise ConfigError(
                f"crop {self.crop_h}x{self.crop_w} not divisible by stride {self.stride}"
            )
        if not 0.0 < self.target_fraction < 1.0:
            raise ConfigError(f"target_fraction must be in (0, 1), got {self.target_fraction}")
        if self.tolerance < 0.0:
            raise ConfigError(f"tolerance must be non-negative, got {self.tolerance}")
        if self.target_fraction - self.tolerance <= 0.0:
            raise ConfigError("target_fraction - tolerance must stay positive")
        if self.scale_sampling not in ("interval", "endpoints"):
            raise ConfigError(f"unknown scale_sampling {self.scale_sampling!r}")

    @property
    def grid_h(self) -> int:
        return self.crop_h // self.stride

    @property
    def grid_w(self) -> int:
        return self.crop_w // self.stride


@dataclass(frozen=True)
class NoiseMask:
    """Binary grid marking the cells where noise features replace source features."""

    grid: np.ndarray  # uint8 H_m x W_m of {0, 1}
    stride: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def gen_sample_mask(rng: np.random.Generator) -> np.ndarray:
    """Draw a 3x3 Bernoulli(2/3) pattern, redrawing the (rare) all-zero result."""
    while True:
        grid = (rng.random((3, 3)) < _SAMPLE_P1).astype(np.uint8)
        if grid.any():
            return grid


def _size_bounds(dim: int) -> tuple[int, int]:
    lo = math.ceil(dim / 6)
    hi = math.floor(2 * dim / 3)
    return lo, max(lo, hi)


def _draw_size(rng: np.random.Generator, dim: int, mode: str) -> int:
    lo, hi = _size_bounds(dim)
    if mode == "interval":
        return int(rng.integers(lo, hi + 1))
    return lo if rng.integers(0, 2) == 0 else hi


def _ones_window(cfg: MaskGenConfig) -> tuple[int, int]:
    total = cfg.grid_h * cfg.grid_w
    eps = 1e-9
    k_hi = math.floor(cfg.target_fraction * total + eps)
    k_lo = math.ceil((cfg.target_fraction - cfg.tolerance) * total - eps)
    k_lo = max(k_lo, 1)
    if k_hi < k_lo:
        raise ArgumentError(
            f"fraction window [{cfg.target_fraction - cfg.tolerance:.4f}, "
            f"{cfg.target_fraction:.4f}] contains no multiple of 1/{total}"
        )
    return k_lo, k_hi


def gen_noise_mask(config: MaskGenConfig) -> NoiseMask:
    """Grow a noise mask until its ones fraction lands in [target - tolerance, target]."""
    k_lo, k_hi = _ones_window(config)
    h, w = config.grid_h, config.grid_w
    rng = np.random.default_rng(config.seed)
    grid = np.zeros((h, w), dtype=np.uint8)
    ones = 0

    for _ in range(_MAX_PLACEMENTS):
        sample = gen_sample_mask(rng)
        size_h = _draw_size(rng, h, config.scale_sampling)
        size_w = _draw_size(rng, w, config.scale_sampling)
        patch = nn_resize(sample, size_h, size_w)
        oy = int(rng.integers(0, h - size_h + 1))
        ox = int(rng.integers(0, w - size_w + 1))

        region = grid[oy : oy + size_h, ox : ox + size_w]
        new_y, new_x = np.nonzero(patch & (region == 0))
        region |= patch
        ones += len(new_y)
        if ones < k_lo:
            continue
        if ones > k_hi:
            # trim random cells of this stamp; it brought us past the window,
            # so removing its own cells always reaches k_hi
            order = rng.permutation(len(new_y))
            for i in order[: ones - k_hi]:
                grid[oy + new_y[i], ox + new_x[i]] = 0
            ones = k_hi
        return NoiseMask(grid=grid, stride=config.stride)

    raise ArgumentError(
        f"mask generation made no progress after {_MAX_PLACEMENTS} placements"
    )


def mask_fraction(mask: NoiseMask | np.ndarray) -> float:
    """Fraction of cells set to 1."""
    grid = mask.grid if isinstance(mask, NoiseMask) else np.asarray(mask)
    return float(np.count_nonzero(grid)) / grid.size
