"""Desk-scale training of the injected-noise discriminator.

Every step pairs a source crop with a noise crop, augments and normalizes
both (statistics always come from the source dataset), grows a fresh noise
mask, splits it across the encoder's injection sites, runs the injected
forward pass, and trains a per-cell binary head with focal loss against
the mask-derived semantic label. Episodes are seeded as (global seed,
sample index), so the data schedule is reproducible no matter how loading
is parallelized.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderConfig, Neck, conv1x1_params, load_into, save_checkpoint
from .errors import ArgumentError, ConfigError, DataError, DimensionError, StatisticsError
from .imageio import load_image
from .labels import semantic_from_mask
from .layersplit import split_mask
from .masks import MaskGenConfig, gen_noise_mask, mask_fraction
from .tensor import (
    GradientMap,
    Tape,
    Tensor,
    add,
    backward,
    conv2d,
    focal_loss_with_logits,
    nn_resize_chw,
    scale,
)

__all__ = [
    "REFERENCE_BATCH_SIZE",
    "TrainConfig",
    "AugmentationConfig",
    "ChannelStats",
    "DatasetPairing",
    "MetricsRow",
    "TrainResult",
    "EvalReport",
    "PretextModel",
    "augment",
    "normalize",
    "focal_loss",
    "lr_at_epoch",
    "sgd_step",
    "train_pretext",
    "eval_pretext",
    "compute_stats",
    "list_images",
    "pretext_iou",
    "write_metrics_csv",
]

log = logging.getLogger(__name__)

# batch size of the reference training recipe; desk-scale runs override it
REFERENCE_BATCH_SIZE = 256

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# eval episodes draw from a stream disjoint from training's (seed, index) stream
_EVAL_SEED_OFFSET = 0x5EED


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = REFERENCE_BATCH_SIZE
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    milestone_fractions: tuple[float, float] = (0.6, 0.8)
    crop: int = 224
    target_fraction: float = 0.2
    granularity: int = 4
    mask_tolerance: float = 0.02
    scale_sampling: str = "interval"
    mask_downsample: str = "coverage"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    supervision: str = "canonical"  # or "crop"
    precision: str = "single"  # or "double"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        for m in self.milestones:
            if not 0 < m < self.epochs:
                raise ConfigError(
                    f"lr milestone {m} falls outside (0, {self.epochs}); use more epochs"
                )
        if self.crop % self.granularity:
            raise ConfigError(f"crop {self.crop} not divisible by granularity {self.granularity}")
        if self.supervision not in ("canonical", "crop"):
            raise ConfigError(f"unknown supervision {self.supervision!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def milestones(self) -> tuple[int, ...]:
        return tuple(math.floor(f * self.epochs) for f in self.milestone_fractions)

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def mask_config(self, seed: int) -> MaskGenConfig:
        return MaskGenConfig(
            crop_h=self.crop,
            crop_w=self.crop,
            stride=self.granularity,
            target_fraction=self.target_fraction,
            tolerance=self.mask_tolerance,
            seed=seed,
            scale_sampling=self.scale_sampling,
        )


@dataclass(frozen=True)
class AugmentationConfig:
    hflip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    grayscale_prob: float = 0.2
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)

    def __post_init__(self):
        for name in ("hflip_prob", "blur_prob", "grayscale_prob", "jitter_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.blur_sigma
        if not 0.0 < lo <= hi:
            raise ConfigError(f"blur_sigma range must be positive and ordered, got {self.blur_sigma}")
        if any(s < 0 for s in self.jitter_strength):
            raise ConfigError("jitter strengths must be non-negative")
        if self.jitter_strength[3] > 0.5:
            raise ConfigError(f"hue strength must be <= 0.5, got {self.jitter_strength[3]}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(hflip_prob=0.0, blur_prob=0.0, grayscale_prob=0.0, jitter_prob=0.0)


# ---------------------------------------------------------------------------
# dataset statistics and pairing


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    n_images: int

    def to_json(self) -> str:
        payload = {"mean": list(self.mean), "std": list(self.std), "n_images": self.n_images}
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChannelStats":
        try:
            payload = json.loads(text)
            return cls(
                mean=tuple(float(v) for v in payload["mean"]),
                std=tuple(float(v) for v in payload["std"]),
                n_images=int(payload["n_images"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed statistics JSON: {exc}") from exc


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def compute_stats(directory) -> ChannelStats:
    """Per-channel mean/std over every decodable image in a directory."""
    files = list_images(directory)
    total = np.zeros(3)
    total_sq = np.zeros(3)
    pixels = 0
    n_images = 0
    for path in files:
        try:
            img = load_image(path)
        except DataError as exc:
            log.warning("skipping unreadable image: %s", exc)
            continue
        total += img.sum(axis=(1, 2))
        total_sq += (img**2).sum(axis=(1, 2))
        pixels += img.shape[1] * img.shape[2]
        n_images += 1
    if n_images == 0:
        raise DataError(f"no decodable images in {directory}")
    mean = total / pixels
    var = np.maximum(total_sq / pixels - mean**2, 0.0)
    return ChannelStats(mean=tuple(mean.tolist()), std=tuple(np.sqrt(var).tolist()), n_images=n_images)


@dataclass(frozen=True)
class DatasetPairing:
    """Source/noise directories plus source-derived normalization statistics."""

    source_dir: Path
    noise_dir: Path
    stats: ChannelStats

    @classmethod
    def from_dirs(cls, source_dir, noise_dir, stats: ChannelStats | None = None) -> "DatasetPairing":
        source_dir, noise_dir = Path(source_dir), Path(noise_dir)
        return cls(source_dir, noise_dir, stats or compute_stats(source_dir))


# ---------------------------------------------------------------------------
# augmentation


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.zeros_like(img)
    padded = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    h = img.shape[1]
    for i, k in enumerate(kernel):
        out += k * padded[:, i : i + h, :]
    img2 = np.zeros_like(out)
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="reflect")
    w = img.shape[2]
    for i, k in enumerate(kernel):
        img2 += k * padded[:, :, i : i + w]
    return img2


def _to_grayscale(img: np.ndarray) -> np.ndarray:
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.repeat(luma[None], 3, axis=0)


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    safe_delta = np.where(delta == 0.0, 1.0, delta)
    rc = (maxc - r) / safe_delta
    gc = (maxc - g) / safe_delta
    bc = (maxc - b) / safe_delta
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta == 0.0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0.0, 0.0, delta / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([h, s, maxc])


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _color_jitter(img: np.ndarray, strength, rng: np.random.Generator) -> np.ndarray:
    sb, sc, ss, sh = strength
    if sb > 0:
        img = np.clip(img * rng.uniform(max(0.0, 1.0 - sb), 1.0 + sb), 0.0, 1.0)
    if sc > 0:
        anchor = _to_grayscale(img).mean()
        img = np.clip((img - anchor) * rng.uniform(max(0.0, 1.0 - sc), 1.0 + sc) + anchor, 0.0, 1.0)
    if ss > 0:
        gray = _to_grayscale(img)
        img = np.clip(gray + (img - gray) * rng.uniform(max(0.0, 1.0 - ss), 1.0 + ss), 0.0, 1.0)
    if sh > 0:
        hsv = _rgb_to_hsv(img)
        hsv[0] = (hsv[0] + rng.uniform(-sh, sh)) % 1.0
        img = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return img


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomly flip / jitter / grayscale / blur a (3, H, W) image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ArgumentError("augment expects image values in [0, 1]")
    if rng.random() < cfg.hflip_prob:
        img = img[:, :, ::-1]
    if rng.random() < cfg.jitter_prob:
        img = _color_jitter(img, cfg.jitter_strength, rng)
    if rng.random() < cfg.grayscale_prob:
        img = _to_grayscale(img)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = _gaussian_blur(img, sigma)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def normalize(image: np.ndarray, stats: ChannelStats) -> Tensor:
    """Per-channel (value - mean) / std against source-dataset statistics."""
    img = np.asarray(image, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    if (std <= 0.0).any():
        raise StatisticsError(f"non-positive channel std {stats.std}; cannot normalize")
    mean = np.asarray(stats.mean, dtype=np.float64)
    return Tensor((img - mean[:, None, None]) / std[:, None, None])


# ---------------------------------------------------------------------------
# loss, schedule, optimizer


def focal_loss(pred_logits: Tensor, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean binary focal loss of per-cell logits against a 0/1 grid."""
    return focal_loss_with_logits(pred_logits, target, alpha=alpha, gamma=gamma)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: the base rate decays by the configured factor at each milestone."""
    if not 0 <= epoch < cfg.epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr = cfg.base_lr
    for m in cfg.milestones:
        if epoch >= m:
            # sequential multiply keeps the reference values (0.002, 0.0002) exact
            lr *= cfg.lr_decay_factor
    return lr


def sgd_step(
    params: dict[str, Tensor],
    grads,
    lr: float,
    momentum: float,
    weight_decay: float,
    state: dict[str, np.ndarray],
):
    """Momentum SGD: v <- mu*v + (g + wd*theta); theta <- theta - lr*v. Mutates params/state."""
    for name, tens in params.items():
        if isinstance(grads, GradientMap):
            g = grads[tens]
        else:
            g = np.asarray(grads[name])
        if g.shape != tens.data.shape:
            raise DimensionError(
                f"gradient for {name} has shape {g.shape}, parameter is {tens.data.shape}"
            )
        update = g.astype(tens.data.dtype) + weight_decay * tens.data
        vel = state.get(name)
        vel = update if vel is None else momentum * vel + update
        state[name] = vel
        tens.data = tens.data - lr * vel
    return params, state


# ---------------------------------------------------------------------------
# model


class PretextModel:
    """Encoder + fusion neck + 1x1 discriminator head producing per-cell logits."""

    def __init__(self, enc_config: EncoderConfig, crop: int, granularity: int, dtype=np.float32):
        self.enc_config = enc_config
        self.crop = crop
        self.granularity = granularity
        self.canonical = (crop // granularity, crop // granularity)
        self.encoder = Encoder(enc_config, dtype=dtype)
        self.neck = Neck(
            self.encoder.level_channels,
            enc_config.neck_channels,
            self.canonical,
            seed=enc_config.seed + 1,
            dtype=dtype,
        )
        head_rng = np.random.default_rng(enc_config.seed + 2)
        w, b = conv1x1_params(head_rng, enc_config.neck_channels, 1, np.dtype(dtype))
        self.head_weight, self.head_bias = w, b

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update(self.neck.params)
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def injection_dims(self) -> list[tuple[int, int]]:
        return self.encoder.injection_dims(self.crop, self.crop)

    def head_logits(self, fused: Tensor) -> Tensor:
        return conv2d(fused, self.head_weight, self.head_bias)

    def forward_injected(self, source_img: Tensor, noise_img: Tensor, mask_set) -> Tensor:
        noise_pyr = self.encoder.encode_plain(noise_img)
        composite = self.encoder.encode_with_injection(source_img, noise_pyr, mask_set)
        return self.head_logits(self.neck(composite))


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    step: int
    lr: float
    loss: float
    pretext_iou: float


@dataclass
class TrainResult:
    model: PretextModel
    metrics: list[MetricsRow]
    sample_fractions: list[float] = field(default_factory=list)
    checkpoint_path: Path | None = None
    metrics_path: Path | None = None


@dataclass(frozen=True)
class EvalReport:
    mean_iou: float
    samples: list[tuple[int, float, float]]  # (episode index, iou, mask fraction)

    def to_json(self) -> str:
        payload = {
            "mean_iou": self.mean_iou,
            "samples": [
                {"episode": i, "iou": iou, "mask_fraction": frac} for i, iou, frac in self.samples
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def pretext_iou(logits_data: np.ndarray, mask_grid: np.ndarray) -> float:
    """IoU of the thresholded (p > 0.5, i.e. logit > 0) prediction against the mask."""
    pred = np.asarray(logits_data).reshape(mask_grid.shape) > 0.0
    actual = np.asarray(mask_grid) != 0
    union = np.logical_or(pred, actual).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, actual).sum() / union)


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    lines = ["epoch,step,lr,loss,pretext_iou"]
    lines += [f"{r.epoch},{r.step},{r.lr!r},{r.loss!r},{r.pretext_iou!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_corpus(directory) -> list[np.ndarray]:
    images = []
    for path in list_images(directory):
        try:
            images.append(load_image(path))
        except DataError as exc:
            log.warning("skipping unreadable image: %s", exc)
    if not images:
        raise DataError(f"no decodable images in {directory}")
    return images


def _random_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < crop or w < crop:
        raise DataError(f"image {h}x{w} smaller than crop {crop}")
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    return img[:, oy : oy + crop, ox : ox + crop]


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _run_episode(model: PretextModel, cfg: TrainConfig, aug: AugmentationConfig,
                 stats: ChannelStats, source_imgs, noise_imgs, rng):
    """One injection episode: returns (loss tensor, iou, mask fraction)."""
    source = source_imgs[int(rng.integers(len(source_imgs)))]
    noise = noise_imgs[int(rng.integers(len(noise_imgs)))]
    source = augment(_random_crop(source, cfg.crop, rng), aug, rng)
    noise = augment(_random_crop(noise, cfg.crop, rng), aug, rng)
    source_t = normalize(source, stats)
    noise_t = normalize(noise, stats)

    mask = gen_noise_mask(cfg.mask_config(seed=int(rng.integers(np.iinfo(np.int64).max))))
    mask_set = split_mask(mask, model.injection_dims(), rng, downsample=cfg.mask_downsample)

    logits = model.forward_injected(source_t, noise_t, mask_set)
    if cfg.supervision == "crop":
        target = semantic_from_mask(mask, (cfg.crop, cfg.crop))
        loss = focal_loss(nn_resize_chw(logits, cfg.crop, cfg.crop), target,
                          alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
    else:
        target = semantic_from_mask(mask, mask.shape)
        loss = focal_loss(logits, target, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
    iou = pretext_iou(logits.data, mask.grid)
    return loss, iou, mask_fraction(mask)


def train_pretext(
    cfg: TrainConfig,
    pairing: DatasetPairing,
    enc_config: EncoderConfig | None = None,
    aug: AugmentationConfig | None = None,
    checkpoint_path=None,
    metrics_path=None,
) -> TrainResult:
    """Train the discriminator; returns the model plus the per-step metrics log."""
    enc_config = enc_config or EncoderConfig()
    aug = aug or AugmentationConfig()
    source_imgs = _load_corpus(pairing.source_dir)
    noise_imgs = _load_corpus(pairing.noise_dir)

    model = PretextModel(enc_config, cfg.crop, cfg.granularity, dtype=cfg.dtype)
    params = model.parameters()
    state: dict[str, np.ndarray] = {}
    metrics: list[MetricsRow] = []
    fractions: list[float] = []
    steps_per_epoch = math.ceil(len(source_imgs) / cfg.batch_size)
    sample_index = 0
    global_step = 0

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        for _ in range(steps_per_epoch):
            with Tape() as tape:
                total = None
                iou_sum = 0.0
                for _ in range(cfg.batch_size):
                    rng = _episode_rng(cfg.seed, sample_index)
                    sample_index += 1
                    loss_b, iou_b, frac = _run_episode(
                        model, cfg, aug, pairing.stats, source_imgs, noise_imgs, rng
                    )
                    total = loss_b if total is None else add(total, loss_b)
                    iou_sum += iou_b
                    fractions.append(frac)
                loss = scale(total, 1.0 / cfg.batch_size)
                grads = backward(loss, tape)
            sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, state)
            metrics.append(
                MetricsRow(
                    epoch=epoch,
                    step=global_step,
                    lr=lr,
                    loss=float(loss.data),
                    pretext_iou=iou_sum / cfg.batch_size,
                )
            )
            global_step += 1
        log.info(
            "epoch %d: lr=%g loss=%.5f iou=%.3f",
            epoch, lr, metrics[-1].loss, metrics[-1].pretext_iou,
        )

    result = TrainResult(model=model, metrics=metrics, sample_fractions=fractions)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
        result.metrics_path = Path(metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params)
        result.checkpoint_path = Path(checkpoint_path)
    return result


def eval_pretext(
    checkpoint,
    pairing: DatasetPairing,
    n_samples: int,
    cfg: TrainConfig,
    enc_config: EncoderConfig | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Mean pretext IoU over freshly generated injection episodes (no augmentation).

    ``checkpoint`` may be a file path or an already-built PretextModel.
    """
    if isinstance(checkpoint, PretextModel):
        model = checkpoint
    else:
        model = PretextModel(enc_config or EncoderConfig(), cfg.crop, cfg.granularity, dtype=cfg.dtype)
        load_into(model.parameters(), checkpoint)
    source_imgs = _load_corpus(pairing.source_dir)
    noise_imgs = _load_corpus(pairing.noise_dir)
    eval_seed = (cfg.seed + _EVAL_SEED_OFFSET) if seed is None else seed
    no_aug = AugmentationConfig.disabled()
    eval_cfg = replace(cfg, supervision="canonical")

    samples = []
    total = 0.0
    for k in range(n_samples):
        rng = _episode_rng(eval_seed, k)
        _, iou, frac = _run_episode(
            model, eval_cfg, no_aug, pairing.stats, source_imgs, noise_imgs, rng
        )
        samples.append((k, iou, frac))
        total += iou
    return EvalReport(mean_iou=total / max(n_samples, 1), samples=samples)
