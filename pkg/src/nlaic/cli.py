"""Command-line entry point: ``nlaic {train,encode,decode,eval,bdrate,inspect,masks}``.

Every command exits 0 on success and 1 with a one-line diagnostic on stderr
for any runtime error (usage errors exit 2, as argparse does).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .bitstream import parse_bitstream
from .codec import attention_masks, compress, decompress, rate_breakdown
from .entropy import CONTEXT_VARIANTS
from .metrics import bd_rate
from .networks import ArchConfig, CodecModel
from .train import (
    TrainConfig,
    crop_patches,
    fit_scaling_factors,
    list_images,
    load_image,
    rd_point,
    refine_context,
    save_image,
    train,
)

log = logging.getLogger("nlaic")


class CliError(Exception):
    """User-facing failure reported without a traceback."""


# ------------------------------------------------------------------ helpers


def _load_model(path) -> CodecModel:
    try:
        return CodecModel.load(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"image {path} not found")
    try:
        return load_image(path)
    except Exception as exc:  # PIL raises many error types for bad files
        raise CliError(f"cannot read image {path}: {exc}") from None


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def load_curve(path, metric: str = "psnr") -> tuple[str, list[tuple[float, float]]]:
    """Read an RD curve JSON: ``{"label": .., "points": [{"bpp": .., "<metric>": ..}, ..]}``.

    Points are sorted by rate; rates must be strictly increasing.
    """
    path = Path(path)
    if not path.is_file():
        raise CliError(f"curve file {path} not found")
    try:
        doc = json.loads(path.read_text())
        points = [(float(p["bpp"]), float(p[metric])) for p in doc["points"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"{path}: not an RD curve with 'bpp' and '{metric}' per point ({exc})") from None
    points.sort()
    if any(b[0] <= a[0] for a, b in zip(points, points[1:])):
        raise CliError(f"{path}: rates must be strictly increasing")
    return str(doc.get("label", path.stem)), points


def _plot_curves(curves: list[dict], out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for curve in curves:
        pts = curve["points"]
        bpp = [p["bpp"] for p in pts]
        axes[0].plot(bpp, [p["psnr"] for p in pts], "o-", label=curve["label"])
        axes[1].plot(bpp, [p["msssim_db"] for p in pts], "o-", label=curve["label"])
    for ax, ylabel in zip(axes, ("PSNR (dB)", "MS-SSIM (dB)")):
        ax.set_xlabel("bits per pixel")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)


def _to_json(value):
    """NaN and inf become null so output is strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _to_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_to_json(v) for v in value]
    return value


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    if args.init:
        model = _load_model(args.init)
    else:
        model = CodecModel(ArchConfig(n_channels=args.width, latent_channels=args.latent_channels, seed=args.seed))
    try:
        patches = crop_patches(args.images, args.patch_size, args.patches, args.seed)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if args.epochs > 0:
        cfg = TrainConfig(lam=args.lam, metric=args.metric, lr=args.lr, epochs=args.epochs,
                          batch_size=args.batch_size, seed=args.seed, patch_size=args.patch_size,
                          variant=args.variant, max_steps=args.max_steps)
        hist = train(model, patches, cfg, log_path=args.log, ckpt_path=args.out)
        if hist:
            last = hist[-1]
            print(f"trained {len(hist)} steps: loss {last['loss']:.4f} bpp {last['bpp_x'] + last['bpp_z']:.4f} "
                  f"d {last['d']:.6f}")
    for variant in CONTEXT_VARIANTS if args.refine_steps else ():
        curve = refine_context(model, patches, variant, steps=args.refine_steps, seed=args.seed)
        print(f"refined {variant}: latent bpp {curve[0]:.4f} -> {curve[-1]:.4f}")
    if args.scaling_lams:
        fits = fit_scaling_factors(model, patches, args.scaling_lams, args.variant, args.metric,
                                   steps=args.scaling_steps, seed=args.seed)
        for fit in fits:
            model.quality_tables.append(fit.table)
            note = "" if fit.converged else " (did not converge)"
            print(f"quality {len(model.quality_tables) - 1}: lambda {fit.table.lam:g} "
                  f"loss {fit.initial_loss:.4f} -> {fit.final_loss:.4f}{note}")
    model.save(args.out)
    print(f"saved {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    img = _read_image(args.input)
    try:
        comp = compress(model, img, args.quality, args.variant)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    Path(args.output).write_bytes(comp.data)
    rb = rate_breakdown(comp.data)
    print(f"{args.output}: {len(comp.data)} bytes, {comp.bpp:.4f} bpp (estimate {comp.est_bpp:.4f})")
    print(f"  header {rb['header_bits']} bits ({rb['header_share']:.1f}%), hyper {rb['hyper_bits']} bits "
          f"({rb['hyper_share']:.1f}%), main {rb['main_bits']} bits ({rb['main_share']:.1f}%)")
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    path = Path(args.input)
    if not path.is_file():
        raise CliError(f"bitstream {path} not found")
    dec = decompress(model, path.read_bytes(), parallel=not args.sequential)
    save_image(args.output, dec.image)
    print(f"{args.output}: {dec.header.width}x{dec.header.height}, quality {dec.header.quality}, "
          f"variant {dec.header.variant}")
    return 0


def cmd_eval(args) -> int:
    try:
        paths = list_images(args.images)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    if not paths:
        raise CliError(f"no images in {args.images}")
    images = [_read_image(p) for p in paths]
    curves = []
    for model_path in args.model:
        model = _load_model(model_path)
        qualities = args.quality if args.quality else list(range(len(model.quality_tables)))
        points = []
        for q in qualities:
            try:
                point = rd_point(model, images, q, args.variant)
            except ValueError as exc:
                raise CliError(str(exc)) from None
            for row, p in zip(point["images"], paths):
                row["image"] = p.name
            points.append(point)
            print(f"{Path(model_path).name} q={q}: {point['bpp']:.4f} bpp, {point['psnr']:.2f} dB PSNR, "
                  f"{point['msssim_db']:.2f} dB MS-SSIM")
        points.sort(key=lambda p: p["bpp"])
        curves.append({"label": f"{Path(model_path).stem}:{args.variant}", "variant": args.variant, "points": points})
    doc = curves[0] if len(curves) == 1 else {"curves": curves}
    if args.json:
        Path(args.json).write_text(json.dumps(_to_json(doc), indent=2))
    if args.plot:
        _plot_curves(curves, Path(args.plot))
    return 0


def cmd_bdrate(args) -> int:
    a_label, anchor = load_curve(args.anchor, args.metric)
    t_label, test = load_curve(args.test, args.metric)
    try:
        value = bd_rate(anchor, test)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(f"BD-rate of {t_label} vs {a_label} ({args.metric}): {value:+.2f}%")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise CliError(f"bitstream {path} not found")
    data = path.read_bytes()
    header, _, _ = parse_bitstream(data)
    rb = rate_breakdown(data)
    if args.json:
        print(json.dumps({"header": header.to_dict(), **rb}, indent=2))
        return 0
    print(f"{path}: {header.width}x{header.height}, C={header.channels}, quality {header.quality}, "
          f"variant {header.variant}, L={header.bound}, hyper L={header.hyper_bound}")
    for seg in ("header", "hyper", "main"):
        print(f"  {seg:6s} {rb[seg + '_bits']:8d} bits  {rb[seg + '_share']:6.2f}%")
    print(f"  total  {rb['total_bits']:8d} bits  {rb['bpp']:.4f} bpp")
    return 0


def cmd_masks(args) -> int:
    model = _load_model(args.model)
    img = _read_image(args.input)
    masks = attention_masks(model, img)
    if not 0 <= args.layer < len(masks):
        raise CliError(f"layer {args.layer} not in [0, {len(masks) - 1}]")
    mask = masks[args.layer][0] if masks[args.layer].ndim == 4 else masks[args.layer]
    channels = args.channels if args.channels else list(range(min(4, mask.shape[0])))
    bad = [c for c in channels if not 0 <= c < mask.shape[0]]
    if bad:
        raise CliError(f"channels {bad} not in [0, {mask.shape[0] - 1}]")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for c in channels:
        path = out / f"mask_l{args.layer}_c{c}.png"
        save_image(path, np.repeat(mask[c][None], 3, axis=0))
        written.append(path)
    total = mask.sum(axis=0)
    span = total.max() - total.min()
    norm = (total - total.min()) / span if span > 0 else np.zeros_like(total)
    path = out / f"mask_l{args.layer}_sum.png"
    save_image(path, np.repeat(norm[None], 3, axis=0))
    written.append(path)
    np.save(out / f"mask_l{args.layer}_raw.npy", mask)
    print(f"wrote {len(written)} mask images to {out} (raw range {mask.min():.4f}..{mask.max():.4f})")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlaic", description="Learned image codec with non-local attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, refine context heads and fit scaling tables")
    p.add_argument("--images", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="output checkpoint (.nlck)")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--lam", type=float, default=1024.0, help="rate-distortion trade-off lambda")
    p.add_argument("--metric", choices=("mse", "msssim"), default="mse")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1, help="0 skips transform training")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--patches", type=int, default=500, help="number of random crops")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--width", type=int, default=32, help="feature channels of a fresh model")
    p.add_argument("--latent-channels", type=int, default=32)
    p.add_argument("--variant", choices=CONTEXT_VARIANTS, default="full_causal")
    p.add_argument("--refine-steps", type=int, default=0, help="context-head refinement steps per variant")
    p.add_argument("--scaling-lams", type=_parse_floats, help="comma-separated lambdas to fit scaling tables for")
    p.add_argument("--scaling-steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="JSONL training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress an image to .nlc")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-q", "--quality", type=int, default=0, help="scaling table index")
    p.add_argument("--variant", choices=CONTEXT_VARIANTS, default="full_causal")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress .nlc to an image")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--sequential", action="store_true", help="disable the parallel context schedule")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="RD evaluation over an image directory")
    p.add_argument("-m", "--model", required=True, nargs="+")
    p.add_argument("--images", required=True)
    p.add_argument("-q", "--quality", type=int, nargs="*", help="quality indices (default: all)")
    p.add_argument("--variant", choices=CONTEXT_VARIANTS, default="full_causal")
    p.add_argument("--json", help="write the RD curve(s) here")
    p.add_argument("--plot", help="write a PSNR / MS-SSIM plot here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two RD curve JSON files")
    p.add_argument("anchor")
    p.add_argument("test")
    p.add_argument("--metric", choices=("psnr", "msssim_db"), default="psnr")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("inspect", help="header fields and per-segment rate breakdown")
    p.add_argument("input")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("masks", help="dump attention masks of one encoder NLAM")
    p.add_argument("input")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--layer", type=int, default=0, help="NLAM index in the main encoder")
    p.add_argument("--channels", type=int, nargs="*", help="mask channels to dump (default: first 4)")
    p.set_defaults(func=cmd_masks)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"nlaic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
