"""Acceptance criteria 1-10, one or more tests per criterion.

Each test carries ``@pytest.mark.criterion(n)``; the terminal summary prints a
PASS/FAIL line per criterion with the measured quantities.  Criteria 5-7, 9
and 10 use the cached desk-scale models from ``_desk``.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from _desk import BUDGET_SECONDS, DESK, load_desk, natural_test_images, training_images
from nlaic import autodiff as ad
from nlaic import cli, codec
from nlaic import entropy as E
from nlaic import rangecoder as rc
from nlaic.attention import NonLocalBlock
from nlaic.metrics import bd_rate, ms_ssim, msssim_db, psnr
from nlaic.networks import ArchConfig, CodecModel
from nlaic.train import TrainConfig, crop_patches, overfit, rd_point
from test_attention import nln_direct
from test_entropy import LATENT, allowed_offsets, grouped_params, sequential_params

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def desk(request):
    return load_desk(request.config.cache.mkdir("nlaic-desk"))


@pytest.fixture(scope="module")
def natural():
    return natural_test_images()


def random_images(count=100, size=64):
    rng = np.random.default_rng(2024)
    out = []
    for n in range(count):
        if n % 2:
            out.append(rng.random((3, size, size)))
        else:
            # smooth random field: upsampled noise
            small = rng.random((3, size // 8, size // 8))
            out.append(np.clip(np.kron(small, np.ones((8, 8))) + rng.normal(0, 0.02, (3, size, size)), 0, 1))
    return out


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1)
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(ROOT / "tests" / "test_autodiff.py")], capture_output=True, text=True, cwd=ROOT)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record_property("detail", f"{summary}; {elapsed:.1f} s (limit 120 s)")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert elapsed < 120


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2)
def test_nln_equivalence(record_property):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        block = NonLocalBlock(8, 4, rng)
        x = rng.normal(size=(8, 4, 4))
        worst = max(worst, float(np.abs(block(ad.Tensor(x)).data - nln_direct(block, x)).max()))
    rng = np.random.default_rng(99)
    dense = NonLocalBlock(8, 4, rng)
    sparse = NonLocalBlock(8, 4, np.random.default_rng(1), sparse=1)
    for (_, p), (_, q) in zip(dense.named_params(), sparse.named_params()):
        q.data[...] = p.data
    x = rng.normal(size=(8, 6, 6))
    identical = np.array_equal(dense(ad.Tensor(x)).data, sparse(ad.Tensor(x)).data)
    record_property("detail", f"max |matrix - direct| = {worst:.2e} over 20 tensors; s=1 bit-identical: {identical}")
    assert worst <= 1e-9
    assert identical


# ------------------------------------------------------------------ 3


def _dependency_errors(variant, kernel):
    head = E.ContextHead(variant, np.random.default_rng(11), kernel=kernel)
    if head.uses_context:
        head.k.data += ad.causal_mask(head.k.shape, variant) * 0.5
    head.b1.data[...] = 5.0
    rng = np.random.default_rng(12)
    x = rng.normal(size=LATENT)
    hyp = rng.normal(size=(8,) + LATENT[1:])
    base = E.context_params(head, x, hyp)
    allowed = allowed_offsets(variant, kernel)
    errors = 0
    for src in np.ndindex(*LATENT):
        xp = x.copy()
        xp[src] += 1.0
        mu, sigma = E.context_params(head, xp, hyp)
        changed = (mu != base[0]) | (sigma != base[1])
        for dst in np.ndindex(*LATENT):
            off = tuple(s - d for s, d in zip(src, dst))
            errors += bool(changed[dst]) != (off in allowed)
    return errors


@pytest.mark.criterion(3)
def test_causality_suite(record_property):
    errors = {v: _dependency_errors(v, 5) for v in E.CONTEXT_VARIANTS}
    schedules = {}
    for variant in ("channel_only", "no_left"):
        head = E.ContextHead(variant, np.random.default_rng(13), kernel=5)
        rng = np.random.default_rng(14)
        x = rng.normal(size=LATENT)
        hyp = rng.normal(size=(8,) + LATENT[1:])
        seq, par = sequential_params(head, x, hyp), grouped_params(head, x, hyp, variant)
        schedules[variant] = np.array_equal(seq[0], par[0]) and np.array_equal(seq[1], par[1])
    record_property("detail", f"dependency mismatches {errors}; parallel == sequential {schedules}")
    assert all(v == 0 for v in errors.values())
    assert all(schedules.values())


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4)
def test_coder_suite(record_property):
    rng = np.random.default_rng(4)
    pmfs = rng.random((64, 33)) ** 3 + 1e-9
    cdfs = rc.build_cdfs(pmfs / pmfs.sum(1, keepdims=True))
    ids = rng.integers(0, 64, 1_000_000)
    symbols = np.array([np.searchsorted(cdfs[t], v, side="right") - 1
                        for t, v in zip(ids, rng.integers(0, rc.TOTAL, ids.size))], np.int64)
    data = rc.rc_encode(symbols, cdfs, ids)
    out = rc.rc_decode(data, cdfs, symbols.size, ids)
    ideal = rc.ideal_bits(symbols, cdfs, ids)
    excess = 8 * len(data) - ideal
    same = rc.rc_encode(out, cdfs, ids) == data

    short = symbols[:3000]
    stream = rc.rc_encode(short, cdfs, ids[:3000])
    undetected = 0
    for cut in range(1, len(stream)):
        try:
            rc.rc_decode(stream[:cut], cdfs, short.size, ids[:3000])
            undetected += 1
        except rc.CorruptStreamError:
            pass
    record_property("detail", f"1e6 symbols, {len(data)} bytes, {excess:.1f} bits over entropy; "
                              f"re-encode identical: {same}; undetected truncations {undetected}/{len(stream) - 1}")
    np.testing.assert_array_equal(out, symbols)
    assert excess <= 32
    assert same
    assert undetected == 0


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5)
def test_codec_round_trip(desk, natural, record_property):
    model = desk[1]["base"]
    images = random_images() + natural
    lo_margin, hi_ratio, failures = np.inf, 0.0, []
    for n, img in enumerate(images):
        comp = codec.compress(model, img)
        dec = codec.decompress(model, comp.data)
        if codec.reencode(model, dec) != comp.data or not np.array_equal(dec.symbols, comp.symbols):
            failures.append(n)
        est, actual = comp.est_bits["total"], comp.bits
        lo_margin = min(lo_margin, actual - est)
        hi_ratio = max(hi_ratio, actual / (1.02 * est + 64))
        if not (comp.bpp >= comp.est_bpp - 1e-6 and actual <= 1.02 * est + 64):
            failures.append(n)
    record_property("detail", f"{len(images)} images; min(actual - est) = {lo_margin:.1f} bits; "
                              f"max actual/(1.02 est + 64) = {hi_ratio:.3f}; failures {failures}")
    assert not failures


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6)
def test_desk_overfit(record_property):
    patches = crop_patches(training_images(), 64, 16, seed=5)
    model = CodecModel(ArchConfig(n_channels=DESK["width"], latent_channels=DESK["width"]))
    losses = overfit(model, patches, TrainConfig(lam=DESK["lam_base"], lr=DESK["lr"]), steps=50)
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    record_property("detail", f"(a) overfit loss {losses[0]:.2f} -> {losses[-1]:.2f}, {drops}/49 steps decrease")
    assert drops == 49


def _inversions(points, bpp_tol=0.02, db_tol=0.1):
    """Count order violations along increasing lambda; small ones within tolerance are allowed once."""
    hard, soft = 0, 0
    for p, q in zip(points, points[1:]):
        for key, tol in (("bpp", None), ("psnr", db_tol)):
            if q[key] > p[key]:
                continue
            small = (p[key] - q[key] <= bpp_tol * p[key]) if key == "bpp" else (p[key] - q[key] <= tol)
            if small:
                soft += 1
            else:
                hard += 1
    return hard, soft


@pytest.mark.criterion(6)
def test_desk_lambda_sweep(desk, natural, record_property):
    summary, models = desk
    names = [f"sweep_{int(lam)}" for lam in sorted(DESK["sweep_lams"])] + ["base"]
    points = [rd_point(models[n], natural, 0, "full_causal") for n in names]
    hard, soft = _inversions(points)
    curve = ", ".join(f"{p['bpp']:.3f} bpp/{p['psnr']:.2f} dB" for p in points)
    record_property("detail", f"(b) sweep {curve}; inversions {hard} hard, {soft} within tolerance; "
                              f"training {summary['seconds'] / 60:.1f} min (limit 30)")
    assert hard == 0 and soft <= 1
    assert summary["seconds"] <= BUDGET_SECONDS


@pytest.mark.criterion(6)
def test_desk_context_saving(desk, natural, record_property):
    model = desk[1]["base"]
    full = rd_point(model, natural, 0, "full_causal")
    hyper = rd_point(model, natural, 0, "hyper_only")
    saving = 100.0 * (hyper["bpp"] - full["bpp"]) / hyper["bpp"]
    record_property("detail", f"(c) full_causal {full['bpp']:.4f} bpp vs hyper_only {hyper['bpp']:.4f} bpp at "
                              f"{full['psnr']:.2f} dB: saving {saving:.2f}%")
    assert full["psnr"] == hyper["psnr"]
    assert saving >= 0.0


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7)
def test_variable_rate(desk, natural, record_property):
    base, vr = desk[1]["base"], desk[1]["variable_rate"]
    assert vr.fingerprint() == base.fingerprint()
    qualities = range(len(vr.quality_tables))
    points = [rd_point(vr, natural, q, "full_causal") for q in qualities]
    bpps = [p["bpp"] for p in points]
    dbs = [p["psnr"] for p in points]
    monotone = all(b > a for a, b in zip(bpps, bpps[1:])) and all(b > a for a, b in zip(dbs, dbs[1:]))

    top = len(vr.quality_tables) - 1
    assert vr.sf(top).is_identity()
    exact = True
    for img in natural:
        ref = codec.compress(base, img, 0).data
        plain = codec.compress(base, img, 0, scaling=False).data
        scaled = bytearray(codec.compress(vr, img, top).data)
        # the streams differ only in the quality index byte of the header
        assert scaled[11] == top
        scaled[11] = 0
        exact &= bytes(scaled) == ref == plain
    curve = ", ".join(f"q{q}: {b:.3f} bpp/{d:.2f} dB" for q, b, d in zip(qualities, bpps, dbs))
    record_property("detail", f"{curve}; monotone {monotone}; identity table reproduces base stream: {exact}")
    assert len(points) >= 3 and monotone
    assert exact


@pytest.mark.criterion(7)
def test_scale_shrinks_with_lambda_distance(desk, record_property):
    tables = desk[1]["variable_rate"].quality_tables
    fitted = [t for t in tables if not t.is_identity()]
    lams = [t.lam for t in fitted]
    means = [float(t.a.mean()) for t in fitted]
    record_property("detail", "mean a by lambda " + ", ".join(f"{lam:g}: {m:.3f}" for lam, m in zip(lams, means)))
    assert lams == sorted(lams) and all(lam < DESK["lam_base"] for lam in lams)
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[-1] < 1.0


# ------------------------------------------------------------------ 8


@pytest.mark.criterion(8)
def test_metrics_suite(record_property):
    x = np.random.default_rng(8).random((3, 64, 64))
    self_sim = ms_ssim(x, x)
    db = msssim_db(0.9)
    a = np.full((3, 16, 16), 0.4)
    p = psnr(a, a + 1 / 255)
    curve = [(0.1, 30.0), (0.2, 32.0), (0.4, 34.5), (0.8, 36.0)]
    same = bd_rate(curve, curve)
    double = bd_rate(curve, [(2 * r, q) for r, q in curve])
    record_property("detail", f"ms_ssim(x,x)-1 = {self_sim - 1:.1e}; d=0.9 -> {db:.4f} dB; PSNR {p:.4f} dB; "
                              f"BD identical {same:.2f}%, doubled {double:.3f}%")
    assert abs(self_sim - 1) <= 1e-9
    assert abs(db - 10.0) < 1e-12
    assert abs(p - 48.13) <= 0.01
    assert f"{same:.2f}" in ("0.00", "-0.00")
    assert abs(double - 100.0) <= 0.1


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9)
def test_masks(desk, natural, tmp_path, record_property):
    model = desk[1]["base"]
    lo, hi = 1.0, 0.0
    for img in natural:
        for m in codec.attention_masks(model, img):
            lo, hi = min(lo, float(m.min())), max(hi, float(m.max()))
    model_path = tmp_path / "base.nlck"
    model.save(model_path)
    img_path = tmp_path / "sample.png"
    from nlaic.train import save_image

    save_image(img_path, natural[0])
    code = cli.main(["masks", str(img_path), "-m", str(model_path), "-o", str(tmp_path / "masks"),
                     "--channels", "0", "1", "2"])
    files = sorted(p.name for p in (tmp_path / "masks").glob("*.png"))
    record_property("detail", f"mask range [{lo:.4f}, {hi:.4f}]; dumped {len(files)} images")
    assert 0 < lo and hi < 1
    assert code == 0 and len(files) == 4


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10)
def test_rate_breakdown_trend(desk, record_property):
    from skimage import data

    vr = desk[1]["variable_rate"]
    img = np.repeat(data.camera()[None, 192:320, 192:320] / 255.0, 3, axis=0)
    shares, sums = [], []
    for q in range(len(vr.quality_tables)):
        rb = codec.rate_breakdown(codec.compress(vr, img, q).data)
        shares.append(rb["hyper_share"])
        sums.append(rb["header_share"] + rb["hyper_share"] + rb["main_share"])
    record_property("detail", "hyper share by quality " + ", ".join(f"{s:.2f}%" for s in shares))
    assert all(abs(s - 100.0) < 1e-9 for s in sums)
    assert len(shares) >= 3
    assert all(b < a for a, b in zip(shares, shares[1:]))
