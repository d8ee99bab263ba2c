import numpy as np
import pytest
from scipy.stats import chisquare

from iqvae import ar, tensor as T
from iqvae.config import ArConfig
from iqvae.rng import Rng

K = 8       # codebook size for these tests
N_TOK = 16


def _model(seed: int = 0, randomize_head: bool = False) -> ar.ARModel:
    cfg = ArConfig(blocks=2, width=32, heads=4)
    model = ar.ARModel(cfg, K, N_TOK, Rng(seed))
    if randomize_head:
        head_rng = Rng(seed + 1)
        model.head_w.data = (head_rng.normals(32 * K).reshape(32, K)
                             .astype(np.float32))
    return model


def _tokens(rng: Rng, shape) -> np.ndarray:
    return np.array([rng.randint(K) for _ in range(int(np.prod(shape)))],
                    dtype=np.int64).reshape(shape)


class TestUntrainedModel:
    def test_distributions_exactly_uniform(self):
        model = _model()
        rng = Rng(1)
        cond = _tokens(rng, (2, N_TOK))
        img = _tokens(rng, (2, N_TOK))
        with T.no_grad():
            logits = ar.ar_forward(model, cond, img)
        assert logits.shape == (2, N_TOK, K)
        np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))

    def test_uniform_nll_is_log_k(self):
        model = _model()
        rng = Rng(2)
        value = ar.nll(model, _tokens(rng, (4, N_TOK)), _tokens(rng, (4, N_TOK)))
        assert abs(value - np.log(K)) < 1e-3


class TestCausality:
    def test_future_image_tokens_never_leak(self):
        # Bitwise: the distribution for position i only changes when a token
        # at some position < i (or the condition) changes.
        model = _model(randomize_head=True)
        rng = Rng(3)
        cond = _tokens(rng, (1, N_TOK))
        img = _tokens(rng, (1, N_TOK))
        with T.no_grad():
            base = ar.ar_forward(model, cond, img).data
        for j in range(N_TOK):
            mutated = img.copy()
            mutated[0, j] = (mutated[0, j] + 1) % K
            with T.no_grad():
                out = ar.ar_forward(model, cond, mutated).data
            np.testing.assert_array_equal(out[:, :j + 1], base[:, :j + 1])
            if j + 1 < N_TOK:
                assert not np.array_equal(out[:, j + 1:], base[:, j + 1:])

    def test_condition_affects_every_position(self):
        model = _model(randomize_head=True)
        rng = Rng(4)
        cond = _tokens(rng, (1, N_TOK))
        img = _tokens(rng, (1, N_TOK))
        with T.no_grad():
            base = ar.ar_forward(model, cond, img).data
        mutated = cond.copy()
        mutated[0, 3] = (mutated[0, 3] + 1) % K
        with T.no_grad():
            out = ar.ar_forward(model, mutated, img).data
        for i in range(N_TOK):
            assert not np.array_equal(out[:, i], base[:, i])

    def test_prefix_extension_is_consistent(self):
        # Adding a token appends one distribution, leaving earlier ones intact.
        model = _model(randomize_head=True)
        rng = Rng(5)
        cond = _tokens(rng, (1, N_TOK))
        img = _tokens(rng, (1, 6))
        with T.no_grad():
            short = ar.ar_forward(model, cond, img[:, :4]).data
            longer = ar.ar_forward(model, cond, img).data
        assert short.shape[1] == 5 and longer.shape[1] == 7
        np.testing.assert_array_equal(longer[:, :5], short)

    def test_mask_structure(self):
        mask = ar.build_attention_mask(4, 9)
        allowed = mask == 0.0
        # Condition rows see only condition columns.
        assert allowed[:4, :4].all() and not allowed[:4, 4:].any()
        # Generated rows see the condition plus a causal wedge.
        assert allowed[6, :4].all()
        assert allowed[6, 4:7].all() and not allowed[6, 7:].any()


class TestAssemble:
    def test_vocabulary_layout(self):
        model = _model()
        cond = np.zeros((1, N_TOK), dtype=np.int64)
        img = np.array([[0, K - 1]], dtype=np.int64)
        toks = model.assemble_tokens(cond, img)
        assert toks.shape == (1, N_TOK + 3)
        assert toks[0, 0] == K            # condition offset
        assert toks[0, N_TOK] == 2 * K    # start symbol
        assert toks[0, -1] == K - 1       # image codes unshifted

    def test_range_validation(self):
        model = _model()
        cond = np.zeros((1, N_TOK), dtype=np.int64)
        with pytest.raises(ValueError, match="image token"):
            model.assemble_tokens(cond, np.array([[K]]))
        with pytest.raises(ValueError, match="condition token"):
            model.assemble_tokens(cond - 1, np.zeros((1, 0), dtype=np.int64))
        with pytest.raises(ValueError, match="condition tokens"):
            model.assemble_tokens(np.zeros((1, 3), dtype=np.int64),
                                  np.zeros((1, 0), dtype=np.int64))


class TestSampling:
    def test_k1_is_argmax(self):
        probs = np.array([0.1, 0.2, 0.4, 0.3])
        rng = Rng(6)
        assert all(ar.sample_topk(probs, 1, 1.0, rng) == 2 for _ in range(10))

    def test_argmax_tie_takes_lowest_id(self):
        probs = np.array([0.4, 0.4, 0.2])
        assert ar.sample_topk(probs, 1, 1.0, Rng(7)) == 0

    def test_never_samples_outside_top_k(self):
        probs = np.array([0.05, 0.3, 0.25, 0.2, 0.1, 0.1])
        rng = Rng(8)
        seen = {ar.sample_topk(probs, 3, 1.0, rng) for _ in range(500)}
        assert seen <= {1, 2, 3}

    def test_top_k_frequencies_chi_square(self):
        probs = np.array([0.5, 0.3, 0.2])
        rng = Rng(9)
        draws = np.array([ar.sample_topk(probs, 3, 1.0, rng) for _ in range(20000)])
        counts = np.bincount(draws, minlength=3)
        _, p = chisquare(counts, 20000 * probs)
        assert p > 0.01

    def test_high_temperature_flattens(self):
        probs = np.array([0.7, 0.2, 0.1])
        rng = Rng(10)
        hot = np.bincount([ar.sample_topk(probs, 3, 100.0, rng)
                           for _ in range(6000)], minlength=3)
        # Near-uniform at high temperature.
        assert hot.min() > 6000 / 3 * 0.8

    def test_validation_errors(self):
        probs = np.array([0.5, 0.5])
        rng = Rng(11)
        with pytest.raises(ValueError, match="k must be"):
            ar.sample_topk(probs, 0, 1.0, rng)
        with pytest.raises(ValueError, match="k must be"):
            ar.sample_topk(probs, 3, 1.0, rng)
        with pytest.raises(ValueError, match="temperature"):
            ar.sample_topk(probs, 1, 0.0, rng)
        with pytest.raises(ValueError, match="normalized"):
            ar.sample_topk(np.array([0.9, 0.4]), 1, 1.0, rng)


class TestGeneration:
    def test_shapes_ranges_determinism(self):
        model = _model(randomize_head=True)
        rng = Rng(12)
        cond = _tokens(rng, (3, N_TOK))
        out1 = ar.generate_batch(model, cond, Rng(99), k=4, temperature=1.0)
        out2 = ar.generate_batch(model, cond, Rng(99), k=4, temperature=1.0)
        assert out1.shape == (3, N_TOK)
        assert out1.min() >= 0 and out1.max() < K
        np.testing.assert_array_equal(out1, out2)

    def test_single_condition_wrapper(self):
        model = _model()
        cond = _tokens(Rng(13), (N_TOK,))
        out = ar.generate(model, cond, Rng(1), k=2, temperature=1.0)
        assert out.shape == (N_TOK,)

    def test_free_running_scores_gold(self):
        model = _model()
        rng = Rng(14)
        cond = _tokens(rng, (2, N_TOK))
        gold = _tokens(rng, (2, N_TOK))
        value = ar.free_running_nll(model, cond, gold, Rng(5), 4, 1.0)
        # Uniform model: every position scores exactly ln K.
        assert abs(value - np.log(K)) < 1e-3


class TestOverfit:
    def test_single_pair_memorization(self):
        cfg = ArConfig(blocks=2, width=32, heads=4, lr=3e-3)
        model = ar.ARModel(cfg, K, N_TOK, Rng(20))
        rng = Rng(21)
        cond = _tokens(rng, (1, N_TOK))
        img = _tokens(rng, (1, N_TOK))
        params = model.params()
        opt = T.AdamW([params[k] for k in sorted(params)], lr=cfg.lr)
        for _ in range(150):
            T.reset_graph()
            loss = ar.teacher_loss(model, cond, img)
            T.backward(loss)
            opt.step()
        assert ar.nll(model, cond, img) < 0.5
