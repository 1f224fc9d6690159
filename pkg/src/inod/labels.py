"""Pseudo labels for the three dense pretext tasks, derived from a noise mask.

All labels live at the mask's canonical resolution; multiplying box or grid
coordinates by the granularity stride maps them to pixel space at export.
Connectivity is 4-connected throughout, so regions that touch only at a
corner stay separate components and get separate boxes and instance ids.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .masks import NoiseMask
from .tensor import nn_resize

__all__ = [
    "BoxLabel",
    "InstanceLabel",
    "connected_components",
    "boxes_from_mask",
    "semantic_from_mask",
    "instances_from_mask",
    "boxes_to_json",
]


@dataclass(frozen=True)
class BoxLabel:
    """Axis-aligned box in canonical grid cells; x1/y1 are exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int
    cls: str = "noise"

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ArgumentError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class InstanceLabel:
    """Per-cell instance ids (0 = background) plus the matching boxes, id k -> boxes[k-1]."""

    ids: np.ndarray
    boxes: list[BoxLabel] = field(default_factory=list)


def _as_grid(mask) -> np.ndarray:
    grid = mask.grid if isinstance(mask, NoiseMask) else np.asarray(mask)
    if grid.ndim != 2:
        raise ArgumentError(f"mask must be a 2D grid, got shape {grid.shape}")
    return grid


def connected_components(mask) -> tuple[np.ndarray, int]:
    """Label 4-connected components, ids starting at 1 in raster discovery order."""
    grid = _as_grid(mask)
    h, w = grid.shape
    ids = np.zeros((h, w), dtype=np.int32)
    nonzero = grid != 0
    current = 0
    for y in range(h):
        row = nonzero[y]
        for x in range(w):
            if not row[x] or ids[y, x]:
                continue
            current += 1
            queue = deque([(y, x)])
            ids[y, x] = current
            while queue:
                cy, cx = queue.popleft()
                if cy > 0 and nonzero[cy - 1, cx] and not ids[cy - 1, cx]:
                    ids[cy - 1, cx] = current
                    queue.append((cy - 1, cx))
                if cy + 1 < h and nonzero[cy + 1, cx] and not ids[cy + 1, cx]:
                    ids[cy + 1, cx] = current
                    queue.append((cy + 1, cx))
                if cx > 0 and nonzero[cy, cx - 1] and not ids[cy, cx - 1]:
                    ids[cy, cx - 1] = current
                    queue.append((cy, cx - 1))
                if cx + 1 < w and nonzero[cy, cx + 1] and not ids[cy, cx + 1]:
                    ids[cy, cx + 1] = current
                    queue.append((cy, cx + 1))
    return ids, current


def boxes_from_mask(mask) -> list[BoxLabel]:
    """One tight box per 4-connected component, ordered by component id."""
    ids, count = connected_components(mask)
    return _boxes_from_ids(ids, count)


def _boxes_from_ids(ids: np.ndarray, count: int) -> list[BoxLabel]:
    if count == 0:
        return []
    ys, xs = np.nonzero(ids)
    labels = ids[ys, xs] - 1
    y0 = np.full(count, np.iinfo(np.int64).max)
    x0 = np.full(count, np.iinfo(np.int64).max)
    y1 = np.zeros(count, dtype=np.int64)
    x1 = np.zeros(count, dtype=np.int64)
    np.minimum.at(y0, labels, ys)
    np.minimum.at(x0, labels, xs)
    np.maximum.at(y1, labels, ys)
    np.maximum.at(x1, labels, xs)
    return [
        BoxLabel(x0=int(x0[k]), y0=int(y0[k]), x1=int(x1[k]) + 1, y1=int(y1[k]) + 1)
        for k in range(count)
    ]


def semantic_from_mask(mask, out_dims: tuple[int, int]) -> np.ndarray:
    """Binary semantic grid at the requested resolution (nearest-neighbor)."""
    out_h, out_w = out_dims
    return nn_resize(_as_grid(mask), out_h, out_w)


def instances_from_mask(mask, box_interior: bool = False) -> InstanceLabel:
    """Instance-id grid plus boxes.

    By default each cell keeps its connected-component id, which matches
    labeling every non-zero cell inside a box whenever boxes enclose no
    foreign cells and stays well defined when they do. ``box_interior=True``
    applies that literal rule instead: boxes are visited in id order and
    every non-zero cell inside a box is relabeled to the box's id.
    """
    ids, count = connected_components(mask)
    boxes = _boxes_from_ids(ids, count)
    if box_interior:
        grid = _as_grid(mask)
        ids = np.zeros_like(ids)
        for k, box in enumerate(boxes, start=1):
            window = grid[box.y0 : box.y1, box.x0 : box.x1]
            ids[box.y0 : box.y1, box.x0 : box.x1][window != 0] = k
    return InstanceLabel(ids=ids, boxes=boxes)


def boxes_to_json(boxes: list[BoxLabel], stride: int, crop: tuple[int, int]) -> str:
    """Serialize boxes with their grid metadata, deterministically."""
    payload = {
        "boxes": [b.as_list() for b in boxes],
        "granularity": stride,
        "crop": [crop[0], crop[1]],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
