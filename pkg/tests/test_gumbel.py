import numpy as np
import pytest
from scipy.stats import chisquare

from iqvae import ar, gumbel, tensor as T
from iqvae.config import ArConfig, GumbelConfig, RunConfig
from iqvae.rng import Rng

EULER_GAMMA = 0.5772156649


class TestNoise:
    def test_moments(self):
        g = gumbel.gumbel_noise(Rng(0), 20000)
        assert abs(g.mean() - EULER_GAMMA) < 0.03
        assert abs(g.var() - np.pi ** 2 / 6.0) < 0.08

    def test_finite(self):
        g = gumbel.gumbel_noise(Rng(1), 50000)
        assert np.all(np.isfinite(g))

    def test_deterministic(self):
        np.testing.assert_array_equal(gumbel.gumbel_noise(Rng(2), 100),
                                      gumbel.gumbel_noise(Rng(2), 100))


class TestRelaxedSample:
    def test_lies_on_simplex(self):
        rng = Rng(3)
        p = np.abs(rng.normals(6)) + 0.05
        p /= p.sum()
        noise = gumbel.gumbel_noise(rng, 6)
        y = gumbel.gumbel_softmax_sample(T.constant(p), 0.7, noise)
        assert np.all(y.data >= 0)
        assert abs(float(y.data.sum()) - 1.0) < 1e-6

    def test_matches_direct_formula(self):
        rng = Rng(4)
        p = np.abs(rng.normals(5)) + 0.05
        p /= p.sum()
        noise = gumbel.gumbel_noise(rng, 5)
        y = gumbel.gumbel_softmax_sample(T.constant(p), 0.5, noise).data
        z = (np.log(p + 1e-12) + noise) / 0.5
        want = np.exp(z - z.max())
        want /= want.sum()
        np.testing.assert_allclose(y, want, rtol=1e-5)

    def test_low_temperature_approaches_one_hot(self):
        rng = Rng(5)
        p = np.array([0.2, 0.5, 0.3])
        noise = gumbel.gumbel_noise(rng, 3)
        y = gumbel.gumbel_softmax_sample(T.constant(p), 0.01, noise).data
        hard = np.argmax(np.log(p + 1e-12) + noise)
        assert y[hard] > 0.999

    def test_gradient_wrt_log_probs(self):
        rng = Rng(6)
        logp = T.Tensor(rng.normals(5), requires_grad=True)
        noise = gumbel.gumbel_noise(rng, 5)
        w = T.constant(rng.normals(5))

        def f(logp):
            probs = T.softmax(logp, axis=-1)
            return T.sum_(T.mul(gumbel.gumbel_softmax_sample(probs, 0.8, noise), w))

        assert T.grad_check(f, [logp]) < 1e-3

    def test_argmax_reproduces_categorical(self):
        rng = Rng(7)
        p = np.array([0.45, 0.3, 0.15, 0.1])
        draws = []
        for _ in range(20000):
            g = gumbel.gumbel_noise(rng, 4)
            draws.append(int(np.argmax(np.log(p) + g)))
        counts = np.bincount(np.array(draws), minlength=4)
        _, pval = chisquare(counts, 20000 * p)
        assert pval > 0.01

    def test_rejects_bad_temperature_and_shapes(self):
        p = T.constant(np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="temperature"):
            gumbel.gumbel_softmax_sample(p, 0.0, np.zeros(2))
        with pytest.raises(T.ShapeError):
            gumbel.gumbel_softmax_sample(p, 1.0, np.zeros(3))


class TestReliability:
    def test_hand_oracle(self):
        cb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        probs = np.array([[0.5, 0.3, 0.2]])
        r = gumbel.reliability(probs, cb, np.array([0]))
        assert abs(r[0] - 0.3) < 1e-9  # 0.5*1 + 0.3*0 + 0.2*(-1)

    def test_normalization_of_codebook_rows(self):
        # Row scale must not matter.
        cb = np.array([[2.0, 0.0], [0.0, 5.0]])
        probs = np.array([[1.0, 0.0]])
        r = gumbel.reliability(probs, cb, np.array([0]))
        assert abs(r[0] - 1.0) < 1e-9

    def test_clamped_to_unit_interval(self):
        cb = np.array([[1.0, 0.0], [-1.0, 0.0]])
        probs = np.array([[0.0, 1.0], [1.0, 0.0]])
        r = gumbel.reliability(probs, cb, np.array([0, 0]))
        assert r[0] == 0.0   # raw -1 clamps to 0
        assert r[1] == 1.0

    def test_zero_norm_row_is_an_error(self):
        cb = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="zero-norm"):
            gumbel.reliability(np.array([[0.5, 0.5]]), cb, np.array([0]))


class TestSchedules:
    def test_tau_endpoints_and_monotonic_decay(self):
        total = 100
        taus = [gumbel.tau_schedule(s, total, 1.0, 0.1) for s in range(total)]
        assert abs(taus[0] - 1.0) < 1e-12
        assert abs(taus[-1] - 0.1) < 1e-12
        assert all(a > b for a, b in zip(taus, taus[1:]))

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            gumbel.tau_schedule(0, 10, 0.0, 0.1)

    def test_mix_ramps_then_plateaus(self):
        total = 100
        ps = [gumbel.mix_schedule(s, total, 0.5) for s in range(total)]
        assert ps[0] == 0.0
        assert abs(ps[50] - 0.5) < 1e-12
        assert all(abs(p - 0.5) < 1e-12 for p in ps[50:])
        assert all(a <= b for a, b in zip(ps[:50], ps[1:51]))


def _setup(seed=0):
    rng = Rng(seed)
    k = 8
    model = ar.ARModel(ArConfig(blocks=1, width=32, heads=4), k, 16, rng.derive(1))
    codebook = rng.normals(k * 4).reshape(k, 4)
    cond = np.array([[rng.randint(k) for _ in range(16)]], dtype=np.int64)
    gold = np.array([[rng.randint(k) for _ in range(16)]], dtype=np.int64)
    return model, codebook, cond, gold


class TestTwoPass:
    def test_off_cycle_equals_teacher_loss(self):
        model, cb, cond, gold = _setup()
        gcfg = GumbelConfig(every=4)
        loss, stats = gumbel.two_pass_step(model, cond, gold, cb, gcfg,
                                           step=1, total_steps=100, rng=Rng(5))
        want = ar.teacher_loss(model, cond, gold)
        assert stats["gumbel_step"] == 0.0
        assert float(loss.data) == float(want.data)

    def test_disabled_never_mixes(self):
        model, cb, cond, gold = _setup()
        gcfg = GumbelConfig(enabled=False)
        _, stats = gumbel.two_pass_step(model, cond, gold, cb, gcfg,
                                        step=0, total_steps=100, rng=Rng(5))
        assert stats["gumbel_step"] == 0.0

    def test_forced_mixing_replaces_inputs_not_targets(self):
        # threshold 0 and a saturated schedule: every fed-back position mixes.
        model, cb, cond, gold = _setup()
        gcfg = GumbelConfig(threshold=0.0, mix_max=1.0, every=1)
        T.reset_graph()
        loss, stats = gumbel.two_pass_step(model, cond, gold, cb, gcfg,
                                           step=90, total_steps=100, rng=Rng(6))
        assert stats["gumbel_step"] == 1.0
        assert stats["gumbel_active_positions"] == 15.0  # last token never fed back
        assert 0.0 <= stats["mean_reliability"] <= 1.0
        # The loss still scores the gold sequence: an untrained model with a
        # zero head is uniform no matter the inputs.
        assert abs(float(loss.data) - np.log(8)) < 1e-3
        T.backward(loss)

    def test_straight_through_embedding_gradient_rule(self):
        # Replaced positions spread their gradient over image-code rows in
        # proportion to the relaxed sample; hard positions hit their row only.
        table = T.Tensor(Rng(7).normals(6 * 3).reshape(6, 3),
                         requires_grad=True)
        toks = np.array([[4, 1]])
        replaced = np.array([[True, False]])
        relaxed = np.zeros((1, 2, 2), dtype=np.float32)
        relaxed[0, 0] = [0.75, 0.25]   # over image codes {0, 1}
        embed = gumbel._mixed_embedding(toks, replaced, relaxed)
        T.reset_graph()
        out = embed(table, toks)
        w = np.zeros((1, 2, 3), dtype=np.float32)
        w[0, 0] = [1.0, 2.0, 3.0]
        w[0, 1] = [4.0, 5.0, 6.0]
        T.backward(T.sum_(T.mul(out, T.constant(w))))
        g = table.grad
        np.testing.assert_allclose(g[0], 0.75 * w[0, 0], rtol=1e-6)
        np.testing.assert_allclose(g[1], 0.25 * w[0, 0] + w[0, 1], rtol=1e-6)
        np.testing.assert_allclose(g[4], np.zeros(3), atol=0)

    def test_mixing_respects_reliability_gate(self):
        model, cb, cond, gold = _setup()
        gcfg = GumbelConfig(threshold=1.1, mix_max=1.0, every=1)  # impossible bar
        _, stats = gumbel.two_pass_step(model, cond, gold, cb, gcfg,
                                        step=90, total_steps=100, rng=Rng(8))
        assert stats["gumbel_step"] == 1.0
        assert stats["gumbel_active_positions"] == 0.0


class TestTrainLoop:
    def _tokens(self, n, k, seed):
        rng = Rng(seed)
        cond = np.array([[rng.randint(k) for _ in range(16)] for _ in range(n)])
        gold = np.array([[rng.randint(k) for _ in range(16)] for _ in range(n)])
        return cond, gold

    def test_metrics_and_learning(self):
        cfg = RunConfig()
        cfg.vae.codebook_size = 8
        cfg.ar = ArConfig(blocks=1, width=32, heads=4, epochs=4, batch_size=8)
        cond, gold = self._tokens(32, 8, seed=3)
        cb = Rng(4).normals(8 * 4).reshape(8, 4)
        seen = []
        model, history = gumbel.train_ar(cond, gold, cb, cfg, True,
                                         metrics_cb=seen.append)
        assert seen == history
        for h in history:
            assert {"epoch", "nll", "gumbel_active_positions",
                    "mean_reliability"} <= set(h)
        assert history[-1]["nll"] < history[0]["nll"]

    def test_deterministic(self):
        cfg = RunConfig()
        cfg.vae.codebook_size = 8
        cfg.ar = ArConfig(blocks=1, width=32, heads=4, epochs=2, batch_size=8)
        cond, gold = self._tokens(16, 8, seed=5)
        cb = Rng(6).normals(8 * 4).reshape(8, 4)
        _, h1 = gumbel.train_ar(cond, gold, cb, cfg, True)
        _, h2 = gumbel.train_ar(cond, gold, cb, cfg, True)
        assert h1 == h2

    def test_empty_rejected(self):
        cfg = RunConfig()
        with pytest.raises(ValueError, match="empty"):
            gumbel.train_ar(np.zeros((0, 16), dtype=np.int64),
                            np.zeros((0, 16), dtype=np.int64),
                            np.ones((8, 4)), cfg, True)
