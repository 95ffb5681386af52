import json
import warnings

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from _gradcheck import max_relative_error
from nlaic import autodiff as ad
from nlaic import train as T
from nlaic.networks import ArchConfig, CodecModel

TINY = ArchConfig(n_channels=4, latent_channels=4, context_kernel=3, density_filters=(2,))


def patches(count=8, seed=0):
    return np.random.default_rng(seed).random((count, 3, 64, 64))


class TestLoss:
    def test_perfect_recon_zero_rate(self):
        x = np.random.default_rng(0).random((2, 3, 8, 8))
        assert float(T.rd_loss(x, x, 0.0, 0.0, 100.0).data) == 0.0

    def test_lambda_zero_is_pure_rate(self):
        x = np.random.default_rng(1).random((1, 3, 8, 8))
        loss = T.rd_loss(x, 1 - x, 123.0, 45.0, 0.0, num_pixels=64)
        assert float(loss.data) == (123.0 + 45.0) / 64

    def test_mse_value(self):
        x = np.zeros((1, 3, 4, 4))
        assert float(T.rd_loss(x, x + 0.5, 0.0, 0.0, 2.0).data) == pytest.approx(0.5)

    def test_gradient_wrt_recon_mse(self):
        rng = np.random.default_rng(2)
        x = rng.random((1, 3, 6, 6))
        recon = ad.Param(np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1))
        err = max_relative_error(lambda: T.rd_loss(x, recon, 5.0, 1.0, 300.0, "mse", 36), [recon], eps=1e-4)
        assert err < 1e-4

    def test_gradient_wrt_recon_msssim_sampled(self):
        rng = np.random.default_rng(3)
        x = rng.random((1, 3, 44, 44))
        recon = ad.Param(np.clip(x + rng.normal(scale=0.1, size=x.shape), 0, 1))
        ad.backward(T.rd_loss(x, recon, 5.0, 1.0, 300.0, "msssim", 36))
        eps = 1e-4
        for _ in range(10):
            idx = tuple(int(rng.integers(s)) for s in x.shape)
            orig = recon.data[idx]
            vals = []
            for delta in (eps, -eps):
                recon.data[idx] = orig + delta
                with ad.no_grad():
                    vals.append(float(T.rd_loss(x, recon, 5.0, 1.0, 300.0, "msssim", 36).data))
            recon.data[idx] = orig
            num = (vals[0] - vals[1]) / (2 * eps)
            assert abs(num - recon.grad[idx]) <= 1e-4 * max(abs(num), 1e-6)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="lambda"):
            T.TrainConfig(lam=-1)
        with pytest.raises(ValueError, match="metric"):
            T.TrainConfig(metric="l1")
        with pytest.raises(ValueError, match="variant"):
            T.TrainConfig(variant="everything")


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = ad.Param(np.array([1.0, -2.0]))
        p.grad = np.array([0.3, -5.0])
        opt = T.Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_per_group_rates(self):
        p, q = ad.Param(np.zeros(1)), ad.Param(np.zeros(1))
        opt = T.Adam([p, q], lr=1.0)
        opt.set_lr(0.5, [q])
        p.grad, q.grad = np.ones(1), np.ones(1)
        opt.step()
        assert q.data[0] == pytest.approx(0.5 * p.data[0])


class TestTraining:
    def test_stats_are_finite(self):
        model = CodecModel(TINY)
        opt = T.Adam(model.params(), 1e-4)
        s = T.train_step(model, patches(2), T.TrainConfig(), opt, np.random.default_rng(0))
        assert set(s) >= {"loss", "bpp_x", "bpp_z", "d"}
        assert all(np.isfinite(v) for v in s.values())

    def test_zero_lr_leaves_weights_bit_identical(self):
        model = CodecModel(TINY)
        before = model.state()
        T.train(model, patches(4), T.TrainConfig(lr=0.0, batch_size=2, epochs=1))
        for name, value in model.state().items():
            np.testing.assert_array_equal(value, before[name])

    def test_seeded_runs_are_identical(self):
        cfg = T.TrainConfig(batch_size=2, epochs=1, seed=3)
        runs = []
        for _ in range(2):
            model = CodecModel(TINY)
            runs.append((T.train(model, patches(4), cfg), model.fingerprint()))
        assert runs[0] == runs[1]

    def test_log_and_checkpoint(self, tmp_path):
        model = CodecModel(TINY)
        cfg = T.TrainConfig(batch_size=2, epochs=2, lam=256)
        hist = T.train(model, patches(4), cfg, tmp_path / "log.jsonl", tmp_path / "m.nlck")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == len(hist) == 4
        assert json.loads(lines[-1])["epoch"] == 1
        back = CodecModel.load(tmp_path / "m.nlck")
        assert back.fingerprint() == model.fingerprint()
        assert back.meta["lam"] == 256 and back.meta["steps"] == 4

    def test_max_steps(self):
        hist = T.train(CodecModel(TINY), patches(8), T.TrainConfig(batch_size=2, epochs=5, max_steps=3))
        assert len(hist) == 3

    def test_context_lr_drop(self):
        model = CodecModel(TINY)
        seen = []
        cfg = T.TrainConfig(batch_size=4, epochs=2, context_lr_epoch=1, lr=1e-3)
        orig = T.Adam.set_lr

        def spy(self, lr, params=None):
            seen.append((lr, len(list(params)) if params is not None else None))
            return orig(self, lr, params)

        T.Adam.set_lr = spy
        try:
            T.train(model, patches(4), cfg)
        finally:
            T.Adam.set_lr = orig
        n_ctx = len(model.param_groups()["context"])
        assert seen == [(pytest.approx(1e-3 / 3), n_ctx)]

    def test_divergence_restores_last_good(self, tmp_path):
        model = CodecModel(TINY)
        before = model.state()
        bad = patches(2)
        bad[:, 0, 0, 0] = np.nan
        with pytest.raises(T.TrainingDiverged, match="non-finite"):
            T.train(model, bad, T.TrainConfig(batch_size=2), ckpt_path=tmp_path / "m.nlck")
        for name, value in model.state().items():
            np.testing.assert_array_equal(value, before[name])
        assert CodecModel.load(tmp_path / "m.nlck").fingerprint() == model.fingerprint()

    def test_overfit_loss_strictly_decreases(self):
        model = CodecModel(ArchConfig(n_channels=8, latent_channels=8))
        losses = T.overfit(model, patches(16, seed=4), T.TrainConfig(lr=3e-4), steps=50)
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestPatches:
    def test_shape_range_and_seed(self):
        imgs = [np.random.default_rng(0).random((3, 80, 90))]
        a = T.crop_patches(imgs, 32, 10, seed=1)
        assert a.shape == (10, 3, 32, 32)
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, T.crop_patches(imgs, 32, 10, seed=1))
        assert not np.array_equal(a, T.crop_patches(imgs, 32, 10, seed=2))

    def test_offsets_uniform(self):
        h, w, size = 20, 20, 16
        img = np.zeros((3, h, w))
        img[0] = np.arange(h)[:, None]
        img[1] = np.arange(w)[None, :]
        crops = T.crop_patches([img], size, 5000, seed=3)
        offsets = (crops[:, 0, 0, 0] * (w - size + 1) + crops[:, 1, 0, 0]).astype(int)
        counts = np.bincount(offsets, minlength=(h - size + 1) * (w - size + 1))
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_directory_with_bad_files(self, tmp_path):
        Image.fromarray(np.full((70, 70, 3), 128, np.uint8)).save(tmp_path / "good.png")
        Image.fromarray(np.zeros((10, 10), np.uint8)).save(tmp_path / "tiny.png")
        (tmp_path / "broken.png").write_bytes(b"not an image")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = T.crop_patches(tmp_path, 64, 3)
        assert out.shape == (3, 3, 64, 64)
        np.testing.assert_allclose(out, 128 / 255)
        text = " ".join(str(w.message) for w in caught)
        assert "broken.png" in text and "tiny.png" in text

    def test_nothing_usable(self, tmp_path):
        with pytest.raises(ValueError, match="no usable"):
            T.crop_patches(tmp_path, 64, 3)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            T.crop_patches(tmp_path / "absent", 64, 3)

    def test_image_io_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        T.save_image(tmp_path / "x.png", img)
        np.testing.assert_allclose(T.load_image(tmp_path / "x.png"), img, atol=1e-12)


@pytest.fixture(scope="module")
def lively():
    model = CodecModel(TINY)
    model.enc.layers[6].w.data *= 40.0
    return model


class TestRefinementAndScaling:
    def test_refine_touches_only_one_head(self, lively):
        model = lively.copy()
        before = model.state()
        curve = T.refine_context(model, patches(8), "no_left", steps=5, batch_size=4)
        assert len(curve) == 5
        changed = {n for n, v in model.state().items() if not np.array_equal(v, before[n])}
        assert changed and all(n.startswith("context.no_left.") for n in changed)

    def test_refinement_lowers_rate(self, lively):
        model = lively.copy()
        p = patches(8, seed=5)
        before = T.latent_rate(model, p, "full_causal")
        T.refine_context(model, p, "full_causal", steps=40, lr=1e-2, batch_size=8)
        assert T.latent_rate(model, p, "full_causal") < before

    def test_scaling_fit_keeps_networks(self, lively):
        model = lively.copy()
        fp = model.fingerprint()
        fits = T.fit_scaling_factors(model, patches(4), [64.0, 4096.0], "hyper_only", steps=10, batch_size=4)
        assert model.fingerprint() == fp
        assert [f.table.lam for f in fits] == [64.0, 4096.0]
        for f in fits:
            assert f.table.a.shape == (4,) and np.all(f.table.a > 0)
            assert np.isfinite(f.final_loss)
