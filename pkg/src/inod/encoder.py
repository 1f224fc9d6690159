"""Toy multi-level convolutional encoder with per-level noise injection.

The encoder is a stride-2 stem followed by one stride-2 conv+ReLU per
level, so level l sits at 1/(4*2^l) of the crop. It stands in for a large
backbone; the injection contract is the point, not the architecture. A
noise image is encoded plain once, then the source stream is encoded with
each level's features partially replaced by the noise features before the
next conv runs, so injected noise propagates through deeper levels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .layersplit import LayerMaskSet
from .tensor import Tensor, conv2d, masked_merge, nn_resize_chw, add, relu

__all__ = [
    "LevelSpec",
    "EncoderConfig",
    "FeaturePyramid",
    "Encoder",
    "Neck",
    "inject",
    "conv1x1_params",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
]

_STRIDE_LADDER = (4, 8, 16, 32)


@dataclass(frozen=True)
class LevelSpec:
    out_channels: int
    kernel: int
    stride: int

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be positive, got {self.out_channels}")
        if self.kernel < self.stride or (self.kernel - self.stride) % 2:
            raise ConfigError(
                f"kernel {self.kernel} with stride {self.stride} cannot keep exact "
                f"stride-divided dims (need kernel >= stride with matching parity)"
            )

    @property
    def padding(self) -> int:
        return (self.kernel - self.stride) // 2


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture + init seed; two equal configs build identical encoders."""

    stem: LevelSpec = LevelSpec(8, 4, 2)
    levels: tuple[LevelSpec, ...] = (
        LevelSpec(16, 4, 2),
        LevelSpec(32, 4, 2),
        LevelSpec(64, 4, 2),
        LevelSpec(128, 4, 2),
    )
    inject_levels: tuple[int, ...] | None = None  # None = every level
    neck_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.levels:
            raise ConfigError("encoder needs at least one level")
        cumulative = self.stem.stride
        for i, spec in enumerate(self.levels):
            cumulative *= spec.stride
            if i >= len(_STRIDE_LADDER) or cumulative != _STRIDE_LADDER[i]:
                raise ConfigError(
                    f"cumulative stride {cumulative} at level {i} leaves the "
                    f"{_STRIDE_LADDER} ladder"
                )
        if self.inject_levels is not None:
            bad = [l for l in self.inject_levels if not 0 <= l < len(self.levels)]
            if bad:
                raise ConfigError(f"inject_levels out of range: {bad}")
            if len(set(self.inject_levels)) != len(self.inject_levels):
                raise ConfigError("inject_levels must be unique")
        if self.neck_channels < 1:
            raise ConfigError(f"neck_channels must be positive, got {self.neck_channels}")

    @property
    def injection_sites(self) -> tuple[int, ...]:
        if self.inject_levels is None:
            return tuple(range(len(self.levels)))
        return tuple(sorted(self.inject_levels))

    @property
    def cumulative_strides(self) -> tuple[int, ...]:
        out = []
        cum = self.stem.stride
        for spec in self.levels:
            cum *= spec.stride
            out.append(cum)
        return tuple(out)


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    strides: list[int]

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [t.data.shape[-2:] for t in self.levels]

    def __len__(self) -> int:
        return len(self.levels)


def _uniform_fan_in(rng, shape, fan_in, dtype, requires_grad):
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def conv1x1_params(rng, in_channels: int, out_channels: int, dtype, requires_grad=True):
    weight = _uniform_fan_in(rng, (out_channels, in_channels, 1, 1), in_channels, dtype, requires_grad)
    bias = _uniform_fan_in(rng, (out_channels,), in_channels, dtype, requires_grad)
    return weight, bias


class Encoder:
    """Materialized weights for an EncoderConfig; forward passes are pure."""

    def __init__(self, config: EncoderConfig, dtype=np.float64, requires_grad: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        in_c = 3
        for name, spec in [("stem", config.stem)] + [
            (f"level{i}", spec) for i, spec in enumerate(config.levels)
        ]:
            fan_in = in_c * spec.kernel * spec.kernel
            self.params[f"{name}.weight"] = _uniform_fan_in(
                rng, (spec.out_channels, in_c, spec.kernel, spec.kernel), fan_in, self.dtype, requires_grad
            )
            self.params[f"{name}.bias"] = _uniform_fan_in(
                rng, (spec.out_channels,), fan_in, self.dtype, requires_grad
            )
            in_c = spec.out_channels

    @property
    def level_channels(self) -> list[int]:
        return [spec.out_channels for spec in self.config.levels]

    def level_dims(self, crop_h: int, crop_w: int) -> list[tuple[int, int]]:
        for cum in self.config.cumulative_strides:
            if crop_h % cum or crop_w % cum:
                raise ConfigError(f"crop {crop_h}x{crop_w} not divisible by cumulative stride {cum}")
        return [(crop_h // c, crop_w // c) for c in self.config.cumulative_strides]

    def injection_dims(self, crop_h: int, crop_w: int) -> list[tuple[int, int]]:
        dims = self.level_dims(crop_h, crop_w)
        return [dims[i] for i in self.config.injection_sites]

    def _as_input(self, image) -> Tensor:
        data = image.data if isinstance(image, Tensor) else np.asarray(image)
        if data.ndim != 3 or data.shape[0] != 3:
            raise DimensionError(f"encoder input must be (3, H, W), got {data.shape}")
        rg = image.requires_grad if isinstance(image, Tensor) else False
        return Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=rg)

    def _block(self, name: str, spec: LevelSpec, x: Tensor) -> Tensor:
        out = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                     stride=spec.stride, padding=spec.padding)
        return relu(out)

    def encode_plain(self, image) -> FeaturePyramid:
        """Encode without any injection: conv+ReLU chain, one pyramid entry per level."""
        x = self._block("stem", self.config.stem, self._as_input(image))
        levels = []
        for i, spec in enumerate(self.config.levels):
            x = self._block(f"level{i}", spec, x)
            levels.append(x)
        return FeaturePyramid(levels=levels, strides=list(self.config.cumulative_strides))

    def encode_with_injection(
        self,
        source,
        noise_pyr: FeaturePyramid,
        masks: LayerMaskSet,
        return_source: bool = False,
    ):
        """Encode the source while splicing noise features in at each injection site.

        The level-l source features are computed from the level-(l-1)
        composite, so earlier injections propagate into deeper levels.
        With ``return_source`` the pre-injection source stream is returned
        alongside the composite pyramid.
        """
        sites = self.config.injection_sites
        if len(noise_pyr) != len(self.config.levels):
            raise ConfigError(
                f"noise pyramid has {len(noise_pyr)} levels, encoder expects {len(self.config.levels)}"
            )
        for i, spec in enumerate(self.config.levels):
            if noise_pyr.levels[i].data.shape[0] != spec.out_channels:
                raise ConfigError(
                    f"noise pyramid level {i} has {noise_pyr.levels[i].data.shape[0]} channels, "
                    f"encoder produces {spec.out_channels}"
                )
        if len(masks.layer_grids) != len(sites):
            raise ConfigError(
                f"mask set has {len(masks.layer_grids)} layers, encoder has {len(sites)} injection sites"
            )

        x = self._block("stem", self.config.stem, self._as_input(source))
        composite_levels: list[Tensor] = []
        source_levels: list[Tensor] = []
        for i, spec in enumerate(self.config.levels):
            x = self._block(f"level{i}", spec, x)
            source_levels.append(x)
            if i in sites:
                grid = masks.layer_grids[sites.index(i)]
                if tuple(grid.shape) != tuple(x.data.shape[-2:]):
                    raise ConfigError(
                        f"layer mask {grid.shape} does not match level {i} dims {x.data.shape[-2:]}"
                    )
                x = inject(x, noise_pyr.levels[i], grid)
            composite_levels.append(x)
        pyramid = FeaturePyramid(levels=composite_levels, strides=list(self.config.cumulative_strides))
        if return_source:
            return pyramid, FeaturePyramid(levels=source_levels, strides=list(pyramid.strides))
        return pyramid


def inject(source_l: Tensor, noise_l: Tensor, layer_mask_l: np.ndarray) -> Tensor:
    """Composite features: noise where the layer mask is 1, source elsewhere."""
    return masked_merge(noise_l, source_l, layer_mask_l)


class Neck:
    """Feature fusion: per-level 1x1 conv, resize to canonical dims, elementwise sum."""

    def __init__(self, in_channels: list[int], out_channels: int, out_dims: tuple[int, int],
                 seed: int = 0, dtype=np.float64, requires_grad: bool = True):
        self.out_dims = (int(out_dims[0]), int(out_dims[1]))
        self.out_channels = out_channels
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for i, in_c in enumerate(in_channels):
            w, b = conv1x1_params(rng, in_c, out_channels, np.dtype(dtype), requires_grad)
            self.params[f"neck{i}.weight"] = w
            self.params[f"neck{i}.bias"] = b

    def __call__(self, pyramid: FeaturePyramid) -> Tensor:
        out = None
        for i, level in enumerate(pyramid.levels):
            mixed = conv2d(level, self.params[f"neck{i}.weight"], self.params[f"neck{i}.bias"])
            resized = nn_resize_chw(mixed, *self.out_dims)
            out = resized if out is None else add(out, resized)
        return out


# ---------------------------------------------------------------------------
# checkpoints: b"INOD", version, (name, shape, dtype, offset) table, raw LE data

_MAGIC = b"INOD"
_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    table = []
    payload = bytearray()
    for name, tens in params.items():
        arr = np.ascontiguousarray(tens.data)
        code = "<f4" if arr.dtype == np.float32 else "<f8"
        table.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": len(payload)}
        )
        payload += arr.astype(_DTYPES[code]).tobytes()
    header = json.dumps({"tensors": table}, sort_keys=True, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_end = 12 + header_len
    try:
        table = json.loads(raw[12:header_end].decode("ascii"))["tensors"]
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: malformed checkpoint header") from exc
    out: dict[str, np.ndarray] = {}
    data = raw[header_end:]
    for entry in table:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataError(f"{path}: unknown dtype {entry['dtype']!r} for {entry['name']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(data):
            raise DataError(f"{path}: tensor {entry['name']} extends past end of file")
        out[entry["name"]] = np.frombuffer(data[start:end], dtype=dtype).reshape(shape).copy()
    return out


def load_into(params: dict[str, Tensor], path) -> None:
    """Load a checkpoint into existing parameter tensors; mismatch is a ConfigError."""
    stored = load_checkpoint(path)
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ConfigError(
            f"checkpoint/config mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    for name, tens in params.items():
        arr = stored[name]
        if arr.shape != tens.data.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {arr.shape}, model expects {tens.data.shape}"
            )
        tens.data = arr.astype(tens.data.dtype)
