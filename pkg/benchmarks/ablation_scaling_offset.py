"""Scaling-factor ablation: fit per-channel scale and offset vs scale only.

Loads the desk base checkpoint, refits one table per lambda both ways on the
desk training patches with the networks frozen, and reports the coded rate
and PSNR on the held-out natural crops.

    python benchmarks/ablation_scaling_offset.py --ckpt PATH/base.nlck
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from _desk import DESK, natural_test_images, training_images  # noqa: E402
from nlaic import autodiff as ad  # noqa: E402
from nlaic import train as T  # noqa: E402
from nlaic.entropy import gaussian_likelihood, rate_bits  # noqa: E402
from nlaic.networks import CodecModel  # noqa: E402
from nlaic.quant import QualityScalingSet  # noqa: E402


def fit_scale_only(model, patches, lam, variant="full_causal", steps=100, lr=1e-2, batch_size=8, seed=0):
    """Same loop as ``train.fit_scaling_factors`` with the offset pinned at zero."""
    y_all, z_all = T._frozen_latents(model, patches)
    with ad.no_grad():
        hyp_all = np.concatenate([
            model.hyper_decode(np.sign(z_all[s : s + 32]) * np.floor(np.abs(z_all[s : s + 32]) + 0.5)).data
            for s in range(0, len(z_all), 32)
        ])
    c = model.arch.latent_channels
    head = model.context[variant]
    npix = patches.shape[2] * patches.shape[3]
    a = ad.Param(np.ones((c, 1, 1)))
    opt = T.Adam([a], lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(y_all), size=min(batch_size, len(y_all)), replace=False)
        model.zero_grad()
        a.zero_grad()
        x_hat = ad.round_ste(y_all[idx] * a) / a
        mu, sigma = head.predict(x_hat, hyp_all[idx])
        bits = rate_bits(gaussian_likelihood(x_hat, mu, sigma, a))
        recon = model.main_decode(x_hat, clamp=False)
        loss = lam * T.distortion(patches[idx], recon) + bits / float(len(idx) * npix)
        ad.backward(loss)
        opt.step()
        a.data[...] = np.maximum(a.data, 1e-3)
    model.zero_grad()
    return QualityScalingSet(a.data.reshape(-1), np.zeros(c), lam)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ckpt", type=Path, required=True, help="desk base.nlck")
    parser.add_argument("--steps", type=int, default=DESK["scaling_steps"])
    args = parser.parse_args(argv)

    base = CodecModel.load(args.ckpt)
    patches = T.crop_patches(training_images(), DESK["patch_size"], DESK["patches"], DESK["seed"])
    tests = natural_test_images()
    both = T.fit_scaling_factors(base, patches, DESK["scaling_lams"], steps=args.steps, seed=DESK["seed"])
    print(f"{'lambda':>8s}  {'fit':>6s}  {'bpp':>7s}  {'psnr':>7s}  {'mean|b|':>8s}")
    for fit in both:
        lam = fit.table.lam
        for label, table in (("a+b", fit.table), ("a", fit_scale_only(base, patches, lam, steps=args.steps))):
            m = base.copy()
            m.quality_tables = [table]
            pt = T.rd_point(m, tests, 0, "full_causal")
            print(f"{lam:8.0f}  {label:>6s}  {pt['bpp']:7.4f}  {pt['psnr']:7.3f}  {np.abs(table.b).mean():8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
