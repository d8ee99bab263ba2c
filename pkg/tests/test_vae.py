import numpy as np
import pytest

from iqvae import data, tensor as T, vae
from iqvae.config import RunConfig
from iqvae.rng import Rng


def _small_cfg(**kw):
    cfg = RunConfig()
    cfg.data.n_samples = 64
    cfg.vae.epochs = kw.pop("epochs", 4)
    for k, v in kw.items():
        setattr(cfg.vae, k, v)
    return cfg


class TestPatchify:
    def test_round_trip(self):
        rng = Rng(0)
        grids = rng.normals(3 * 256).reshape(3, 16, 16)
        back = vae.unpatchify(vae.patchify(grids, 4), 4)
        np.testing.assert_array_equal(back, grids)

    def test_patch_rows_are_contiguous_blocks(self):
        grid = np.arange(256, dtype=np.float64).reshape(1, 16, 16)
        patches = vae.patchify(grid, 4)
        np.testing.assert_array_equal(patches[0, 0],
                                      grid[0, :4, :4].reshape(-1))

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            vae.patchify(np.zeros((1, 15, 15)), 4)


class TestQuantize:
    def test_nearest_matches_bruteforce(self):
        rng = Rng(1)
        z = rng.normals(1000 * 4).reshape(1000, 4)
        cb = rng.normals(16 * 4).reshape(16, 4)
        got = vae.nearest_codes(z, cb)
        brute = np.argmin(((z[:, None, :] - cb[None, :, :]) ** 2).sum(-1), axis=1)
        np.testing.assert_array_equal(got, brute)

    def test_ties_go_to_lowest_row(self):
        z = np.array([[1.0, 0.0]])
        cb = np.array([[0.0, 0.0], [2.0, 0.0]])  # equidistant from z
        assert vae.nearest_codes(z, cb)[0] == 0

    def test_quantized_values_are_codebook_rows(self):
        rng = Rng(2)
        z = T.constant(rng.normals(2 * 3 * 4).reshape(2, 3, 4))
        cb = T.Tensor(rng.normals(8 * 4).reshape(8, 4), requires_grad=True)
        q = vae.quantize(z, cb, 0.25)
        np.testing.assert_array_equal(q.quantized.data, cb.data[q.indices])

    def test_index_dequantize_round_trip(self):
        rng = Rng(3)
        cb = T.Tensor(rng.normals(8 * 4).reshape(8, 4).astype(np.float32),
                      requires_grad=True)
        idx = np.array([[0, 7], [3, 3]])
        out = vae.dequantize(idx, cb)
        np.testing.assert_array_equal(out.data, cb.data[idx])
        again = vae.nearest_codes(out.data.reshape(-1, 4), cb.data).reshape(2, 2)
        np.testing.assert_array_equal(again, idx)

    def test_dequantize_range_error(self):
        cb = T.constant(np.zeros((4, 2)))
        with pytest.raises(IndexError):
            vae.dequantize(np.array([[4]]), cb)

    def test_straight_through_gradient_is_identity(self):
        # Downstream gradients land on z exactly as if quantization were skipped.
        rng = Rng(4)
        z = T.Tensor(rng.normals(2 * 2 * 3).reshape(2, 2, 3), requires_grad=True)
        cb = T.Tensor(rng.normals(5 * 3).reshape(5, 3), requires_grad=True)
        w = np.asarray(rng.normals(2 * 2 * 3).reshape(2, 2, 3), dtype=np.float32)
        T.reset_graph()
        q = vae.quantize(z, cb, 0.25)
        T.backward(T.sum_(T.mul(q.quantized, T.constant(w))))
        np.testing.assert_allclose(z.grad, w, rtol=1e-6)

    def test_commit_loss_hand_oracle(self):
        z = T.Tensor(np.array([[[1.0, 0.0]]]), requires_grad=True)
        cb = T.Tensor(np.array([[0.0, 0.0], [2.0, 0.0]]), requires_grad=True)
        q = vae.quantize(z, cb, 0.25)
        # Tie resolves to row 0; both pulls are mse([0,0],[1,0]) = 0.5.
        assert q.indices[0, 0] == 0
        assert abs(float(q.commit_loss.data) - (0.5 + 0.25 * 0.5)) < 1e-6

    def test_commit_loss_trains_codebook_and_encoder(self):
        rng = Rng(5)
        z = T.Tensor(rng.normals(1 * 4 * 3).reshape(1, 4, 3), requires_grad=True)
        cb = T.Tensor(rng.normals(6 * 3).reshape(6, 3), requires_grad=True)
        T.reset_graph()
        q = vae.quantize(z, cb, 0.25)
        T.backward(q.commit_loss)
        assert z.grad is not None and np.any(z.grad != 0)
        assert cb.grad is not None and np.any(cb.grad != 0)


class TestRegularizer:
    def test_gradient_reaches_both_encoders(self):
        rng = Rng(6)
        cfg = RunConfig().vae
        model = vae.VaeModel(cfg, Rng(7))
        imgs = rng.normals(4 * 256).reshape(4, 16, 16)
        conds = (rng.normals(4 * 256).reshape(4, 16, 16) > 0).astype(np.float64)
        ip = vae.patchify(imgs, 4).astype(np.float32)
        cp = vae.patchify(conds, 4).astype(np.float32)
        from iqvae import ot
        dirs = ot.sample_directions(Rng(8), 8, cfg.embed_dim).astype(np.float32)
        T.reset_graph()
        z_i = model.encode_image(T.constant(ip))
        z_c = model.encode_condition(T.constant(cp))
        T.backward(vae.variational_regularizer(z_c, z_i, dirs))
        assert model.enc_image.w1.grad is not None
        assert model.enc_cond.w1.grad is not None
        assert float(np.abs(model.enc_image.w1.grad).sum()) > 0
        assert float(np.abs(model.enc_cond.w1.grad).sum()) > 0


class TestNormalization:
    def test_edge_conditions_untouched(self):
        samples = data.generate_dataset(data.DatasetSpec(n_samples=8, seed=1))
        _, conds = vae.normalize_conditions(samples)
        assert conds.max() <= 1.0
        assert set(np.unique(conds)) <= {0.0, 1.0}

    def test_segment_conditions_scaled_to_unit(self):
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=32, seed=1, mode="segment"))
        _, conds = vae.normalize_conditions(samples)
        assert conds.max() == 1.0
        assert conds.min() == 0.0


class TestTraining:
    def test_loss_decreases_and_metrics_stream(self):
        cfg = _small_cfg(epochs=5)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        seen = []
        model, history = vae.train_iqvae(samples, cfg, metrics_cb=seen.append)
        assert [h["epoch"] for h in history] == list(range(5))
        assert seen == history
        for h in history:
            assert set(h) == {"epoch", "l_total", "l_reg", "l_recon", "l_quan",
                              "codebook_usage"}
        assert history[-1]["l_total"] < history[0]["l_total"]

    def test_codebook_usage_above_half(self):
        # Usage dips while the encoders concentrate mid-training, then
        # recovers; the invariant is about the settled state.
        cfg = _small_cfg(epochs=10)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        _, history = vae.train_iqvae(samples, cfg)
        assert history[-1]["codebook_usage"] >= 0.5

    def test_training_is_deterministic(self):
        cfg = _small_cfg(epochs=2)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        m1, h1 = vae.train_iqvae(samples, cfg)
        m2, h2 = vae.train_iqvae(samples, cfg)
        assert h1 == h2
        for k, t in m1.params().items():
            np.testing.assert_array_equal(t.data, m2.params()[k].data)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_diagnostic(self):
        cfg = _small_cfg(epochs=3, lr=1e18)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        with pytest.raises(vae.TrainingDiverged, match="epoch"):
            vae.train_iqvae(samples, cfg)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            vae.train_iqvae([], _small_cfg())

    def test_checkpoint_round_trip_through_model(self, tmp_path):
        from iqvae.checkpoint import load_checkpoint, save_checkpoint
        cfg = _small_cfg(epochs=1)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        model, _ = vae.train_iqvae(samples, cfg)
        path = str(tmp_path / "v.iqvc")
        save_checkpoint(path, {k: t.data for k, t in model.params().items()})
        fresh = vae.VaeModel(cfg.vae, Rng(123))
        fresh.load_params(load_checkpoint(path))
        c1, i1 = vae.encode_tokens(model, samples[:8])
        c2, i2 = vae.encode_tokens(fresh, samples[:8])
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(i1, i2)

    def test_load_params_rejects_mismatch(self):
        cfg = _small_cfg()
        model = vae.VaeModel(cfg.vae, Rng(1))
        good = {k: t.data for k, t in model.params().items()}
        bad = dict(good)
        bad.pop("codebook_image")
        with pytest.raises(ValueError, match="codebook_image"):
            model.load_params(bad)

    def test_encode_tokens_ranges(self):
        cfg = _small_cfg(epochs=1)
        samples = data.generate_dataset(
            data.DatasetSpec(n_samples=cfg.data.n_samples, seed=cfg.seed))
        model, _ = vae.train_iqvae(samples, cfg)
        cond_tok, img_tok = vae.encode_tokens(model, samples)
        assert cond_tok.shape == (len(samples), 16)
        assert img_tok.shape == (len(samples), 16)
        assert cond_tok.min() >= 0 and cond_tok.max() < cfg.vae.codebook_size
        assert img_tok.min() >= 0 and img_tok.max() < cfg.vae.codebook_size
