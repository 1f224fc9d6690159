"""Shared test helpers: finite-difference oracles and error metrics."""

from __future__ import annotations

import numpy as np
import pytest


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference over the larger of the two max magnitudes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def numeric_grad(fn, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar fn() w.r.t. every entry of array.

    fn must recompute the forward pass reading `array` in place, so the
    oracle never touches the analytic backward path.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn())
        flat[i] = orig - eps
        f_minus = float(fn())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def label_oracle(grid: np.ndarray) -> tuple[np.ndarray, int]:
    """Brute-force 4-connected labeling by min-label propagation to a fixpoint.

    Independent of the production flood fill: every set cell starts with a
    unique label, labels then shrink to the component minimum, and the
    result is renumbered by first occurrence in raster order.
    """
    grid = np.asarray(grid)
    h, w = grid.shape
    big = h * w + 2
    lab = np.where(grid != 0, np.arange(1, h * w + 1).reshape(h, w), big)
    while True:
        neighbor_min = np.full((h, w), big, dtype=lab.dtype)
        neighbor_min[1:, :] = np.minimum(neighbor_min[1:, :], lab[:-1, :])
        neighbor_min[:-1, :] = np.minimum(neighbor_min[:-1, :], lab[1:, :])
        neighbor_min[:, 1:] = np.minimum(neighbor_min[:, 1:], lab[:, :-1])
        neighbor_min[:, :-1] = np.minimum(neighbor_min[:, :-1], lab[:, 1:])
        new = np.where(grid != 0, np.minimum(lab, neighbor_min), big)
        if (new == lab).all():
            break
        lab = new
    ids = np.zeros((h, w), dtype=np.int32)
    remap: dict[int, int] = {}
    for y in range(h):
        for x in range(w):
            if grid[y, x]:
                key = int(lab[y, x])
                if key not in remap:
                    remap[key] = len(remap) + 1
                ids[y, x] = remap[key]
    return ids, len(remap)


def make_stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    """Horizontal two-color stripes with random band height and colors."""
    band = int(rng.integers(2, 5))
    dark = rng.uniform(0.15, 0.45, size=3)
    light = rng.uniform(0.55, 0.9, size=3)
    rows = (np.arange(size) // band) % 2
    img = np.where(rows[None, :, None] == 0, dark[:, None, None], light[:, None, None])
    return np.ascontiguousarray(np.broadcast_to(img, (3, size, size)))


def make_checker(size: int, rng: np.random.Generator) -> np.ndarray:
    """Two-color checkerboard with random cell size and colors."""
    cell = int(rng.integers(2, 5))
    dark = rng.uniform(0.15, 0.45, size=3)
    light = rng.uniform(0.55, 0.9, size=3)
    yy, xx = np.meshgrid(np.arange(size) // cell, np.arange(size) // cell, indexing="ij")
    pattern = ((yy + xx) % 2)[None]
    return np.where(pattern == 0, dark[:, None, None], light[:, None, None]) * np.ones(
        (3, size, size)
    )


def write_texture_corpus(directory, kind: str, count: int, size: int, seed: int) -> None:
    from inod.imageio import save_png

    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    maker = make_stripes if kind == "stripes" else make_checker
    for i in range(count):
        save_png(directory / f"{kind}_{i:03d}.png", maker(size, rng))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
