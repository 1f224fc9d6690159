"""Image and grid file I/O: binary PGM for masks/labels, PNG for photographs.

RGB images travel through the library as float arrays of shape (3, H, W)
with values in [0, 1]. PGM is written by hand so mask and label files are
bit-exact and deterministic; PNG goes through Pillow.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ArgumentError, DataError

__all__ = [
    "write_pgm",
    "read_pgm",
    "mask_to_pgm_bytes",
    "load_image",
    "save_png",
    "check_image",
]


def write_pgm(path, grid: np.ndarray, maxval: int = 255) -> None:
    """Write a 2D integer grid as binary PGM (P5). 16-bit payloads are big-endian."""
    Path(path).write_bytes(_encode_pgm(grid, maxval))


def _encode_pgm(grid: np.ndarray, maxval: int) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ArgumentError(f"PGM payload must be 2D, got shape {grid.shape}")
    if not 1 <= maxval <= 65535:
        raise ArgumentError(f"PGM maxval must be in [1, 65535], got {maxval}")
    if grid.min() < 0 or grid.max() > maxval:
        raise ArgumentError(f"grid values outside [0, {maxval}]")
    h, w = grid.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else np.uint8
    return header + grid.astype(dtype).tobytes()


def mask_to_pgm_bytes(grid: np.ndarray) -> bytes:
    """Encode a 0/1 mask grid as PGM bytes using 0 = source, 255 = noise."""
    return _encode_pgm(np.asarray(grid, dtype=np.uint16) * 255, 255)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a 2D uint array; raises DataError when malformed."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (missing P5 magic)")

    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise DataError(f"{path}: malformed PGM header near byte {start}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise DataError(f"{path}: invalid PGM dimensions or maxval ({width}x{height}, {maxval})")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    expected = width * height * dtype.itemsize
    payload = raw[pos : pos + expected]
    if len(payload) != expected:
        raise DataError(f"{path}: PGM payload truncated ({len(payload)} of {expected} bytes)")
    grid = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return grid.astype(np.uint16) if maxval > 255 else grid.copy()


_MASK_NAME = re.compile(r"mask_(\d+)x(\d+)_s(\d+)_seed(\d+)\.pgm$")


def mask_filename(crop_h: int, crop_w: int, stride: int, seed: int) -> str:
    return f"mask_{crop_h}x{crop_w}_s{stride}_seed{seed}.pgm"


def parse_mask_filename(name: str):
    """Recover (crop_h, crop_w, stride, seed) from a mask filename, or None."""
    m = _MASK_NAME.search(str(name))
    if not m:
        return None
    return tuple(int(g) for g in m.groups())


def check_image(arr: np.ndarray) -> np.ndarray:
    """Validate the (3, H, W) float [0,1] image convention."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ArgumentError(f"image must have shape (3, H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ArgumentError("image values must lie in [0, 1]")
    return arr


def load_image(path, dtype=np.float64) -> np.ndarray:
    """Decode a PNG/JPEG file to a (3, H, W) float array in [0, 1]."""
    try:
        with PILImage.open(path) as img:
            rgb = img.convert("RGB")
            hwc = np.asarray(rgb, dtype=dtype) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(hwc.transpose(2, 0, 1))


def save_png(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float [0,1] array (or a 2D grayscale one) as PNG."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(data, mode="L").save(path, format="PNG")
        return
    check_image(np.clip(arr, 0.0, 1.0))
    hwc = np.clip(np.rint(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(hwc, mode="RGB").save(path, format="PNG")
