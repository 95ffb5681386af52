"""Rate-distortion training, context refinement and scaling-factor fitting.

The loss per batch is ``lam * d + (R_x + R_z) / num_pixels`` with rates in
bits, so the rate term is in bits per pixel.  ``d`` is MSE on ``[0, 1]``
pixels or ``1 - MS-SSIM``.  Quantization is replaced by additive uniform noise
while training.  Scaling factors are fitted with straight-through rounding
instead, because under additive noise the offset ``b`` cancels from both the
rate and the distortion and would receive no gradient.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from . import autodiff as ad
from .entropy import check_variant, gaussian_likelihood, rate_bits
from .metrics import ms_ssim_tensor
from .networks import CodecModel
from .quant import QualityScalingSet, quantize

log = logging.getLogger(__name__)

METRICS = ("mse", "msssim")
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class TrainingDiverged(FloatingPointError):
    """A training step produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lam: float = 1024.0
    metric: str = "mse"
    lr: float = 1e-4
    context_lr_factor: float = 1.0 / 3.0
    context_lr_epoch: int = 30
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    patch_size: int = 64
    variant: str = "full_causal"
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        check_variant(self.variant)


# ------------------------------------------------------------------ loss


def distortion(orig, recon, metric: str = "mse") -> ad.Tensor:
    """Mean distortion over the batch."""
    if metric == "mse":
        diff = ad.as_tensor(recon) - orig
        return ad.mean(diff * diff)
    if metric == "msssim":
        return 1.0 - ad.mean(ms_ssim_tensor(orig, recon))
    raise ValueError(f"unknown metric {metric!r}")


def rd_loss(orig, recon, rate_x, rate_z, lam: float, metric: str = "mse", num_pixels: int = 1) -> ad.Tensor:
    """``lam * d + (rate_x + rate_z) / num_pixels`` with rates in bits."""
    return lam * distortion(orig, recon, metric) + (ad.as_tensor(rate_x) + rate_z) / float(num_pixels)


# ------------------------------------------------------------------ optimizer


class Adam:
    """Adam with per-parameter learning rates (betas 0.9/0.999, eps 1e-8)."""

    def __init__(self, params: Sequence[ad.Param], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lrs = [lr] * len(self.params)
        self.betas, self.eps = betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def set_lr(self, lr: float, params: Iterable[ad.Param] | None = None) -> None:
        ids = None if params is None else {id(p) for p in params}
        for i, p in enumerate(self.params):
            if ids is None or id(p) in ids:
                self.lrs[i] = lr

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * p.grad * p.grad
            p.data -= self.lrs[i] * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# ------------------------------------------------------------------ forward


def forward(model: CodecModel, batch: np.ndarray, variant: str, rng: np.random.Generator) -> dict:
    """Training forward pass with the noise proxy on latents and hyper latents."""
    x = ad.as_tensor(batch)
    y = model.main_encode(x)
    y_tilde = quantize(y, "noise", rng)
    z = model.hyper_encode(y)
    z_tilde = quantize(z, "noise", rng)
    hyp = model.hyper_decode(z_tilde)
    mu, sigma = model.context[variant].predict(y_tilde, hyp)
    rate_x = rate_bits(gaussian_likelihood(y_tilde, mu, sigma))
    rate_z = rate_bits(model.density.likelihood(z_tilde))
    recon = model.main_decode(y_tilde, clamp=False)
    return {"recon": recon, "rate_x": rate_x, "rate_z": rate_z}


def _finite_or_raise(loss: ad.Tensor, params: Sequence[ad.Param], step: int) -> None:
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"step {step}: non-finite loss {float(loss.data)}")
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"step {step}: non-finite gradient in a {p.shape} parameter")


def train_step(model: CodecModel, batch: np.ndarray, cfg: TrainConfig, opt: Adam, rng: np.random.Generator,
               step: int = 0) -> dict:
    """One Adam step on every parameter the optimizer holds; returns stats."""
    model.zero_grad()
    n, _, h, w = batch.shape
    npix = n * h * w
    out = forward(model, batch, cfg.variant, rng)
    d = distortion(batch, out["recon"], cfg.metric)
    loss = cfg.lam * d + (out["rate_x"] + out["rate_z"]) / float(npix)
    ad.backward(loss)
    _finite_or_raise(loss, opt.params, step)
    opt.step()
    return {
        "step": step,
        "loss": float(loss.data),
        "bpp_x": float(out["rate_x"].data) / npix,
        "bpp_z": float(out["rate_z"].data) / npix,
        "d": float(d.data),
    }


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for s in range(0, count - batch_size + 1, batch_size):
        yield order[s : s + batch_size]


def train(model: CodecModel, patches: np.ndarray, cfg: TrainConfig, log_path=None, ckpt_path=None,
          params: Sequence[ad.Param] | None = None,
          callback: Callable[[dict], None] | None = None) -> list[dict]:
    """Epoch loop over shuffled patches with a JSONL stats log.

    On divergence the last good weights are restored (and saved to
    ``ckpt_path`` if given) before :class:`TrainingDiverged` propagates.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.params() if params is None else list(params)
    opt = Adam(params, cfg.lr)
    context_params = [p for _, p in model.context.named_params()]
    batch_size = min(cfg.batch_size, len(patches))
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            if epoch == cfg.context_lr_epoch:
                opt.set_lr(cfg.lr * cfg.context_lr_factor, context_params)
            for idx in _batches(len(patches), batch_size, rng):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    return history
                good = model.state()
                try:
                    stats = train_step(model, patches[idx], cfg, opt, rng, step)
                except TrainingDiverged:
                    model.load_state(good)
                    if ckpt_path:
                        model.save(ckpt_path)
                    raise
                stats["epoch"] = epoch
                history.append(stats)
                if log_file:
                    log_file.write(json.dumps(stats) + "\n")
                if callback:
                    callback(stats)
                step += 1
    finally:
        if log_file:
            log_file.close()
        if ckpt_path:
            model.meta.update({"lam": cfg.lam, "metric": cfg.metric, "variant": cfg.variant,
                               "train": asdict(cfg), "steps": step})
            model.save(ckpt_path)
    return history


def overfit(model: CodecModel, patches: np.ndarray, cfg: TrainConfig, steps: int = 50) -> list[float]:
    """Full-batch steps on a small set with one fixed noise draw.

    Re-seeding the noise every step makes the objective deterministic, so the
    returned per-step losses show optimization progress without sampling noise.
    """
    opt = Adam(model.params(), cfg.lr)
    return [train_step(model, patches, cfg, opt, np.random.default_rng(cfg.seed), s)["loss"] for s in range(steps)]


# ------------------------------------------------------------------ data


def load_image(path) -> np.ndarray:
    """``[3, H, W]`` float image in ``[0, 1]``; grayscale is replicated."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def list_images(image_dir) -> list[Path]:
    root = Path(image_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {root} not found")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def crop_patches(source, size: int = 64, count: int = 500, seed: int = 0) -> np.ndarray:
    """Seeded uniform random crops ``[count, 3, size, size]`` in ``[0, 1]``.

    ``source`` is a directory or a list of ``[3, H, W]`` arrays.  Images that
    cannot be read or are smaller than ``size`` are skipped with a warning.
    """
    images = []
    if isinstance(source, (str, Path)):
        for path in list_images(source):
            try:
                img = load_image(path)
            except Exception as exc:  # PIL raises a zoo of error types
                log.warning("skipping unreadable image %s: %s", path, exc)
                warnings.warn(f"skipping unreadable image {path}: {exc}", stacklevel=2)
                continue
            images.append((str(path), img))
    else:
        images = [(f"image {i}", np.asarray(img, np.float64)) for i, img in enumerate(source)]
    usable = []
    for name, img in images:
        if img.shape[1] < size or img.shape[2] < size:
            log.warning("skipping %s: %dx%d is smaller than the %d patch", name, img.shape[1], img.shape[2], size)
            warnings.warn(f"skipping {name}: smaller than the {size}x{size} patch", stacklevel=2)
            continue
        usable.append(img)
    if not usable:
        raise ValueError("no usable training images (all missing, unreadable or too small)")
    rng = np.random.default_rng(seed)
    out = np.empty((count, 3, size, size))
    for n in range(count):
        img = usable[rng.integers(len(usable))]
        i = rng.integers(0, img.shape[1] - size + 1)
        j = rng.integers(0, img.shape[2] - size + 1)
        out[n] = img[:, i : i + size, j : j + size]
    return out


# ------------------------------------------------------------------ refinement


def _frozen_latents(model: CodecModel, patches: np.ndarray, batch_size: int = 32):
    ys, zs = [], []
    with ad.no_grad():
        for s in range(0, len(patches), batch_size):
            y = model.main_encode(patches[s : s + batch_size]).data
            ys.append(y)
            zs.append(model.hyper_encode(y).data)
    return np.concatenate(ys), np.concatenate(zs)


def refine_context(model: CodecModel, patches: np.ndarray, variant: str, steps: int = 200,
                   lr: float = 3e-3, batch_size: int = 16, seed: int = 0) -> list[float]:
    """Retrain only one context head with every transform frozen.

    Distortion does not depend on the context head, so this minimizes the
    latent rate alone.  Returns the per-step latent bpp.
    """
    check_variant(variant)
    y_all, z_all = _frozen_latents(model, patches)
    head = model.context[variant]
    opt = Adam(head.params(), lr)
    rng = np.random.default_rng(seed)
    npix = patches.shape[2] * patches.shape[3]
    curve = []
    for step in range(steps):
        idx = rng.choice(len(y_all), size=min(batch_size, len(y_all)), replace=False)
        y_tilde = y_all[idx] + rng.uniform(-0.5, 0.5, y_all[idx].shape)
        z_tilde = z_all[idx] + rng.uniform(-0.5, 0.5, z_all[idx].shape)
        with ad.no_grad():
            hyp = model.hyper_decode(z_tilde).data
        head.zero_grad()
        mu, sigma = head.predict(y_tilde, hyp)
        bits = rate_bits(gaussian_likelihood(y_tilde, mu, sigma))
        loss = bits / float(len(idx) * npix)
        ad.backward(loss)
        _finite_or_raise(loss, opt.params, step)
        opt.step()
        curve.append(float(loss.data))
    return curve


def latent_rate(model: CodecModel, patches: np.ndarray, variant: str, seed: int = 0) -> float:
    """Noise-proxy latent bpp of one context head on fixed transforms."""
    y_all, z_all = _frozen_latents(model, patches)
    rng = np.random.default_rng(seed)
    y_tilde = y_all + rng.uniform(-0.5, 0.5, y_all.shape)
    z_tilde = z_all + rng.uniform(-0.5, 0.5, z_all.shape)
    with ad.no_grad():
        hyp = model.hyper_decode(z_tilde).data
        mu, sigma = model.context[variant].predict(y_tilde, hyp)
        bits = rate_bits(gaussian_likelihood(y_tilde, mu, sigma))
    return float(bits.data) / (patches.shape[0] * patches.shape[2] * patches.shape[3])


@dataclass
class ScalingFit:
    table: QualityScalingSet
    initial_loss: float
    final_loss: float

    @property
    def converged(self) -> bool:
        return self.final_loss < self.initial_loss


def fit_scaling_factors(model: CodecModel, patches: np.ndarray, lams: Sequence[float], variant: str = "full_causal",
                        metric: str = "mse", steps: int = 100, lr: float = 1e-2, batch_size: int = 8,
                        seed: int = 0) -> list[ScalingFit]:
    """Fit one per-channel ``(a, b)`` table per target lambda; networks stay frozen.

    Only the main latents are scaled; the hyper path and the context head are
    untouched.  Rounding uses a straight-through estimator.  Fits whose loss
    did not decrease are reported through ``ScalingFit.converged`` and a
    logged warning.
    """
    check_variant(variant)
    y_all, z_all = _frozen_latents(model, patches)
    with ad.no_grad():
        hyp_all = np.concatenate([
            model.hyper_decode(np.sign(z_all[s : s + 32]) * np.floor(np.abs(z_all[s : s + 32]) + 0.5)).data
            for s in range(0, len(z_all), 32)
        ])
    c = model.arch.latent_channels
    head = model.context[variant]
    npix = patches.shape[2] * patches.shape[3]
    fits = []
    for lam in lams:
        a = ad.Param(np.ones((c, 1, 1)))
        b = ad.Param(np.zeros((c, 1, 1)))
        opt = Adam([a, b], lr)
        rng = np.random.default_rng(seed)
        losses = []
        for step in range(steps):
            idx = rng.choice(len(y_all), size=min(batch_size, len(y_all)), replace=False)
            model.zero_grad()
            a.zero_grad()
            b.zero_grad()
            sym = ad.round_ste(y_all[idx] * a + b)
            x_hat = (sym - b) / a
            mu, sigma = head.predict(x_hat, hyp_all[idx])
            bits = rate_bits(gaussian_likelihood(x_hat, mu, sigma, a))
            recon = model.main_decode(x_hat, clamp=False)
            loss = lam * distortion(patches[idx], recon, metric) + bits / float(len(idx) * npix)
            ad.backward(loss)
            _finite_or_raise(loss, [a, b], step)
            opt.step()
            a.data[...] = np.maximum(a.data, 1e-3)
            losses.append(float(loss.data))
        model.zero_grad()
        k = max(1, steps // 10)
        fit = ScalingFit(QualityScalingSet(a.data.reshape(-1), b.data.reshape(-1), lam),
                         float(np.mean(losses[:k])), float(np.mean(losses[-k:])))
        if not fit.converged:
            log.warning("scaling fit for lambda=%g did not reduce the loss (%.4g -> %.4g)",
                        lam, fit.initial_loss, fit.final_loss)
        fits.append(fit)
    return fits


def rd_point(model: CodecModel, images: Sequence[np.ndarray], quality: int, variant: str) -> dict:
    """Mean actual bpp / PSNR / MS-SSIM of real bitstreams over ``images``."""
    from .codec import compress, decompress
    from .metrics import ms_ssim, msssim_db, psnr

    rows = []
    for img in images:
        enc = compress(model, img, quality, variant)
        rec = decompress(model, enc.data).image
        ms = ms_ssim(img, rec) if min(img.shape[1:]) >= 44 else math.nan
        rows.append({"bpp": enc.bpp, "est_bpp": enc.est_bpp, "psnr": psnr(img, rec), "msssim": ms,
                     "msssim_db": msssim_db(ms) if not math.isnan(ms) else math.nan})
    keys = rows[0].keys()
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    mean["msssim_db"] = msssim_db(mean["msssim"]) if not math.isnan(mean["msssim"]) else math.nan
    return {"quality": quality, "variant": variant, "images": rows, **mean}
