"""Command-line entry points for mask generation, labels, training, and inspection.

Exit codes: 0 on success, 2 for usage/config errors (including malformed
label inputs), 3 for runtime data errors. All artifacts are byte-identical
across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .config import load_run_config
from .encoder import Encoder
from .errors import ArgumentError, ConfigError, DataError, DimensionError, StatisticsError
from .labels import boxes_from_mask, boxes_to_json, instances_from_mask, semantic_from_mask
from .layersplit import split_mask
from .masks import NoiseMask, gen_noise_mask, mask_fraction
from .tensor import nn_resize
from .train import (
    ChannelStats,
    DatasetPairing,
    compute_stats,
    eval_pretext,
    normalize,
    train_pretext,
)

_CONFIG_KEYS = """\
config file keys (TOML; override any of them with -O section.key=value):
  seed                      global RNG seed (default 0)
  paths.source_dir          source image directory
  paths.noise_dir           noise image directory
  paths.out_dir             output directory for artifacts
  paths.stats_cache         optional JSON cache for source statistics
  mask.crop                 square crop side in pixels (default 224)
  mask.granularity          mask cell stride, one of 4/8/16/32 (default 4)
  mask.target_fraction      noise quantity upper bound (default 0.2)
  mask.tolerance            allowed shortfall below the target (default 0.02)
  mask.scale_sampling       stamp size draw: interval | endpoints (default interval)
  mask.downsample           coarse-level transport: coverage | center (default coverage)
  encoder.stem              [channels, kernel, stride] (default [8, 4, 2])
  encoder.levels            list of [channels, kernel, stride] (default 4 stride-2 levels)
  encoder.inject_levels     level indices that receive noise (default all)
  encoder.neck_channels     fused feature width (default 32)
  train.epochs              training epochs (default 10)
  train.batch_size          episodes per optimizer step (default 8; reference recipe 256)
  train.base_lr             initial learning rate (default 0.02)
  train.momentum            SGD momentum (default 0.9)
  train.weight_decay        L2 coefficient (default 0.0001)
  train.lr_decay_factor     multiplier at each milestone (default 0.1)
  train.milestone_fractions milestones as epoch fractions (default [0.6, 0.8])
  train.focal_alpha         focal loss alpha (default 0.25)
  train.focal_gamma         focal loss gamma (default 2.0)
  train.supervision         label resolution: canonical | crop (default canonical)
  train.precision           single | double (default single)
  augment.hflip_prob        horizontal flip probability (default 0.5)
  augment.blur_prob         gaussian blur probability (default 0.5)
  augment.blur_sigma        blur sigma range (default [0.1, 2.0])
  augment.grayscale_prob    grayscale probability (default 0.2)
  augment.jitter_prob       color jitter probability (default 0.8)
  augment.jitter_strength   brightness/contrast/saturation/hue (default [0.4,0.4,0.4,0.1])
"""


def _add_config_args(parser):
    parser.add_argument("--config", type=Path, help="TOML run config")
    parser.add_argument(
        "-O",
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. -O mask.granularity=8",
    )
    parser.add_argument("--seed", type=int, help="override the global seed")


def _load_config(args):
    overrides = list(args.override)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, overrides)


def _read_binary_mask(path: Path) -> NoiseMask:
    try:
        grid = imageio.read_pgm(path)
    except DataError as exc:
        # malformed label inputs are usage errors (exit 2), not runtime data errors
        raise ConfigError(str(exc)) from exc
    values = np.unique(grid)
    if not np.isin(values, (0, 255)).all():
        raise ConfigError(f"{path}: mask values must be 0 or 255, found {values.tolist()}")
    parsed = imageio.parse_mask_filename(Path(path).name)
    stride = parsed[2] if parsed else 4
    return NoiseMask(grid=(grid == 255).astype(np.uint8), stride=stride)


def cmd_mask_gen(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.require_path("out_dir")
    if args.count < 0:
        raise ArgumentError(f"--count must be non-negative, got {args.count}")
    if args.count == 0:
        return 0
    out_dir.mkdir(parents=True, exist_ok=True)
    report = []
    for i in range(args.count):
        seed = cfg.seed + i
        mask = gen_noise_mask(cfg.mask_config(seed=seed))
        name = imageio.mask_filename(cfg.crop, cfg.crop, cfg.granularity, seed)
        (out_dir / name).write_bytes(imageio.mask_to_pgm_bytes(mask.grid))
        report.append({"file": name, "seed": seed, "fraction": mask_fraction(mask)})
    payload = {
        "masks": report,
        "target_fraction": cfg.target_fraction,
        "tolerance": cfg.tolerance,
    }
    (out_dir / "fractions.json").write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
    )
    print(f"wrote {args.count} masks to {out_dir}")
    return 0


def cmd_labels_gen(args) -> int:
    mask_path = Path(args.mask)
    mask = _read_binary_mask(mask_path)
    stride = args.granularity if args.granularity is not None else mask.stride
    crop = (mask.grid.shape[0] * stride, mask.grid.shape[1] * stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if args.task == "detect":
        boxes = boxes_from_mask(mask)
        out.write_text(boxes_to_json(boxes, stride, crop))
        print(f"wrote {len(boxes)} boxes to {out}")
    elif args.task == "semantic":
        dims = _parse_dims(args.out_dims) if args.out_dims else mask.grid.shape
        grid = semantic_from_mask(mask, dims)
        imageio.write_pgm(out, grid.astype(np.uint16) * 255, maxval=255)
        print(f"wrote semantic label {dims[0]}x{dims[1]} to {out}")
    else:  # instance
        inst = instances_from_mask(mask)
        pgm_path = out if out.suffix == ".pgm" else out.with_suffix(".pgm")
        if inst.ids.max() > 65535:
            raise DataError(f"{mask_path}: more than 65535 instances")
        imageio.write_pgm(pgm_path, inst.ids.astype(np.uint16), maxval=65535)
        json_path = pgm_path.with_suffix(".json")
        json_path.write_text(boxes_to_json(inst.boxes, stride, crop))
        print(f"wrote {len(inst.boxes)} instances to {pgm_path} / {json_path}")
    return 0


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ArgumentError(f"--out-dims must look like HxW, got {text!r}") from exc
    return h, w


def _resolve_stats(cfg) -> ChannelStats:
    if cfg.stats_cache is not None and Path(cfg.stats_cache).exists():
        return ChannelStats.from_json(Path(cfg.stats_cache).read_text())
    stats = compute_stats(cfg.require_path("source_dir"))
    if cfg.stats_cache is not None:
        Path(cfg.stats_cache).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.stats_cache).write_text(stats.to_json())
    return stats


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out_dir = cfg.require_path("out_dir")
    pairing = DatasetPairing(
        source_dir=cfg.require_path("source_dir"),
        noise_dir=cfg.require_path("noise_dir"),
        stats=_resolve_stats(cfg),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stats.json").write_text(pairing.stats.to_json())
    result = train_pretext(
        cfg.train,
        pairing,
        enc_config=cfg.encoder,
        aug=cfg.augment,
        checkpoint_path=out_dir / "checkpoint.inod",
        metrics_path=out_dir / "metrics.csv",
    )
    last = result.metrics[-1]
    print(
        f"trained {cfg.train.epochs} epochs ({len(result.metrics)} steps): "
        f"loss={last.loss:.5f} iou={last.pretext_iou:.3f}"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pairing = DatasetPairing(
        source_dir=cfg.require_path("source_dir"),
        noise_dir=cfg.require_path("noise_dir"),
        stats=_resolve_stats(cfg),
    )
    report = eval_pretext(
        Path(args.checkpoint), pairing, args.n_samples, cfg.train, enc_config=cfg.encoder
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    stats = compute_stats(Path(args.dir))
    text = stats.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    _, h, w = img.shape
    if h < crop or w < crop:
        raise DataError(f"image {h}x{w} smaller than crop {crop}")
    oy, ox = (h - crop) // 2, (w - crop) // 2
    return img[:, oy : oy + crop, ox : ox + crop]


def cmd_inject_demo(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.require_path("out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)

    source = _center_crop(imageio.load_image(args.source), cfg.crop)
    noise = _center_crop(imageio.load_image(args.noise), cfg.crop)
    if cfg.source_dir is not None:
        stats = _resolve_stats(cfg)
    else:
        # no source corpus configured; fall back to the demo image's own statistics
        mean = source.mean(axis=(1, 2))
        std = np.maximum(source.std(axis=(1, 2)), 1e-6)
        stats = ChannelStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()), n_images=1)

    encoder = Encoder(cfg.encoder, dtype=cfg.train.dtype)
    rng = np.random.default_rng(cfg.seed)
    mask = gen_noise_mask(cfg.mask_config())
    mask_set = split_mask(
        mask, encoder.injection_dims(cfg.crop, cfg.crop), rng, downsample=cfg.downsample
    )
    noise_pyr = encoder.encode_plain(normalize(noise, stats))
    composite, source_pyr = encoder.encode_with_injection(
        normalize(source, stats), noise_pyr, mask_set, return_source=True
    )

    sites = encoder.config.injection_sites
    levels = []
    for i, level in enumerate(composite.levels):
        data = level.data
        entry = {
            "level": i,
            "stride": composite.strides[i],
            "mean": float(data.mean()),
            "std": float(data.std()),
        }
        if i in sites:
            grid = mask_set.layer_grids[sites.index(i)].astype(bool)
            entry["masked_mean"] = float(data[:, grid].mean()) if grid.any() else None
            entry["unmasked_mean"] = float(data[:, ~grid].mean()) if (~grid).any() else None
            entry["source_mean"] = float(source_pyr.levels[i].data.mean())
            entry["noise_mean"] = float(noise_pyr.levels[i].data.mean())
        levels.append(entry)
    summary = {"mask_fraction": mask_fraction(mask), "levels": levels}
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, separators=(",", ":")) + "\n"
    )

    overlay_mask = nn_resize(mask.grid, cfg.crop, cfg.crop).astype(np.float64)
    tint = np.zeros_like(source)
    tint[0] = 1.0
    overlay = source * (1.0 - 0.5 * overlay_mask) + tint * 0.5 * overlay_mask
    imageio.save_png(out_dir / "overlay.png", overlay)
    print(f"wrote {out_dir / 'summary.json'} and {out_dir / 'overlay.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inod",
        description="Injected-noise dataset discrimination toolkit",
        epilog=_CONFIG_KEYS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask-gen", help="generate noise masks as PGM files")
    _add_config_args(p)
    p.add_argument("--count", type=int, required=True, help="number of masks to emit")
    p.add_argument("--out-dir", type=Path, help="output directory (defaults to paths.out_dir)")
    p.set_defaults(func=cmd_mask_gen)

    p = sub.add_parser("labels-gen", help="derive pseudo labels from a mask PGM")
    p.add_argument("--mask", type=Path, required=True, help="input mask PGM (0/255)")
    p.add_argument("--task", choices=("detect", "semantic", "instance"), required=True)
    p.add_argument("--out", type=Path, required=True, help="output file")
    p.add_argument("--out-dims", help="semantic output HxW (default: mask dims)")
    p.add_argument("--granularity", type=int, help="override stride when not in the filename")
    p.set_defaults(func=cmd_labels_gen)

    p = sub.add_parser("pretrain", help="train the discriminator")
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="pretext IoU of a checkpoint on fresh episodes")
    _add_config_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--out", type=Path, help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="per-channel mean/std of an image directory")
    p.add_argument("--dir", type=Path, required=True)
    p.add_argument("--out", type=Path, help="also write the JSON here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("inject-demo", help="one injection episode with summaries and overlay")
    _add_config_args(p)
    p.add_argument("--source", type=Path, required=True, help="source image (PNG/JPEG)")
    p.add_argument("--noise", type=Path, required=True, help="noise image (PNG/JPEG)")
    p.add_argument("--out-dir", type=Path, help="output directory (defaults to paths.out_dir)")
    p.set_defaults(func=cmd_inject_demo)

    return parser


def _cause_chain(exc: BaseException) -> str:
    parts = []
    seen = set()
    while exc is not None and id(exc) not in seen:
        seen.add(id(exc))
        parts.append(str(exc))
        exc = exc.__cause__
    return ": ".join(parts)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError, DimensionError, StatisticsError) as exc:
        print(f"error: {_cause_chain(exc)}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {_cause_chain(exc)}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
