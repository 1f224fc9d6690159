"""Partition a noise mask's components across injection levels.

Every 4-connected component of the mask is assigned to exactly one level,
so the canonical parts sum back to the mask cell for cell. Each part is
then rasterized to its level's spatial dims: nearest-neighbor when the
level is at least as fine as the canonical grid, coverage (a coarse cell
fires if it overlaps any set canonical cell) when it is coarser, so no
assigned region vanishes on the way down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .imageio import write_pgm
from .labels import connected_components
from .masks import NoiseMask
from .tensor import nn_resize

__all__ = ["LayerMaskSet", "split_mask", "rasterize", "export_layer_masks"]


@dataclass(frozen=True)
class LayerMaskSet:
    """Exact partition of a noise mask across levels, plus per-level rasterizations."""

    canonical_parts: list[np.ndarray]
    layer_grids: list[np.ndarray]
    level_dims: list[tuple[int, int]]
    component_levels: dict[int, int]

    def __len__(self) -> int:
        return len(self.canonical_parts)


def _coverage_rows(in_dim: int, out_dim: int) -> np.ndarray:
    # out cell y spans the half-open canonical interval [y*in/out, (y+1)*in/out);
    # it receives canonical cell j iff the intervals overlap (exact integer math)
    transfer = np.zeros((out_dim, in_dim), dtype=bool)
    for y in range(out_dim):
        j_min = (y * in_dim) // out_dim
        j_max = ((y + 1) * in_dim + out_dim - 1) // out_dim - 1
        transfer[y, j_min : j_max + 1] = True
    return transfer


def _nn_rows(in_dim: int, out_dim: int) -> np.ndarray:
    idx = np.floor((np.arange(out_dim) + 0.5) * in_dim / out_dim).astype(np.intp)
    transfer = np.zeros((out_dim, in_dim), dtype=bool)
    transfer[np.arange(out_dim), np.clip(idx, 0, in_dim - 1)] = True
    return transfer


def rasterize(part: np.ndarray, level_dim: tuple[int, int], downsample: str = "coverage") -> np.ndarray:
    """Carry a canonical-resolution binary grid to a level's spatial dims."""
    part = np.asarray(part)
    out_h, out_w = level_dim
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"level dims must be positive, got {level_dim}")
    if downsample not in ("coverage", "center"):
        raise ArgumentError(f"unknown downsample mode {downsample!r}")
    h, w = part.shape
    if downsample == "center" or (out_h >= h and out_w >= w):
        return nn_resize(part, out_h, out_w)
    rows = _nn_rows(h, out_h) if out_h >= h else _coverage_rows(h, out_h)
    cols = _nn_rows(w, out_w) if out_w >= w else _coverage_rows(w, out_w)
    hit = rows.astype(np.int64) @ part.astype(np.int64) @ cols.astype(np.int64).T
    return (hit > 0).astype(part.dtype)


def split_mask(
    mask: NoiseMask | np.ndarray,
    level_dims: list[tuple[int, int]],
    rng: np.random.Generator,
    downsample: str = "coverage",
) -> LayerMaskSet:
    """Assign each mask component to a uniformly random level and rasterize the parts."""
    if not level_dims:
        raise ArgumentError("level_dims must not be empty")
    grid = mask.grid if isinstance(mask, NoiseMask) else np.asarray(mask)
    n_levels = len(level_dims)
    ids, count = connected_components(grid)
    assignment = rng.integers(0, n_levels, size=count)

    cell_level = np.full(count + 1, -1, dtype=np.int64)
    if count:
        cell_level[1:] = assignment
    per_cell = cell_level[ids]

    canonical_parts = [(per_cell == lvl).astype(np.uint8) for lvl in range(n_levels)]
    layer_grids = [
        rasterize(part, dims, downsample) for part, dims in zip(canonical_parts, level_dims)
    ]
    component_levels = {cid: int(assignment[cid - 1]) for cid in range(1, count + 1)}
    return LayerMaskSet(
        canonical_parts=canonical_parts,
        layer_grids=layer_grids,
        level_dims=[tuple(d) for d in level_dims],
        component_levels=component_levels,
    )


def export_layer_masks(masks: LayerMaskSet, out_dir, stem: str = "layer") -> list[Path]:
    """Write one PGM per level plus a JSON sidecar mapping component id to level."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for lvl, grid in enumerate(masks.layer_grids):
        path = out_dir / f"{stem}_{lvl}.pgm"
        write_pgm(path, np.asarray(grid, dtype=np.uint16) * 255, maxval=255)
        paths.append(path)
    sidecar = out_dir / f"{stem}_components.json"
    payload = {str(cid): lvl for cid, lvl in sorted(masks.component_levels.items())}
    sidecar.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")
    paths.append(sidecar)
    return paths
