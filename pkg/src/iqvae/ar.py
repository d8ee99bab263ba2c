"""Conditional autoregressive transformer over quantized token grids.

The input sequence is [condition tokens][start][image tokens so far] with a
disjoint vocabulary: image codes occupy [0, K), condition codes [K, 2K), and
a single start symbol 2K.  The model predicts image codes only.

Attention is masked so that condition positions attend solely among
themselves while start/image positions attend to all condition positions and
causally within the generated segment.  Keeping condition keys blind to image
keys matters: otherwise a later image token could leak backwards through a
condition value in one layer and reach an earlier prediction in the next.

Output distributions for image position i are read at the sequence position
holding its predecessor, so a length-p prefix yields p+1 distributions (capped
at the grid size).  The output head starts at zero, which makes an untrained
model emit exactly uniform distributions.

Generation re-runs the full prefix per step; at 16 positions the quadratic
cost is irrelevant and no key/value cache is kept.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ArConfig
from .rng import Rng

_NEG_MASK = -1e9


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _init_weight(rng: Rng, rows: int, cols: int, scale: float = 0.02) -> T.Tensor:
    w = rng.normals(rows * cols).reshape(rows, cols) * scale
    return T.Tensor(w.astype(np.float32), requires_grad=True)


def _zeros(*shape: int) -> T.Tensor:
    return T.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(n: int) -> T.Tensor:
    return T.Tensor(np.ones(n, dtype=np.float32), requires_grad=True)


def build_attention_mask(n_cond: int, seq_len: int) -> np.ndarray:
    """Additive (seq_len, seq_len) mask: 0 where allowed, large negative else."""
    allowed = np.zeros((seq_len, seq_len), dtype=bool)
    for q in range(seq_len):
        if q < n_cond:
            allowed[q, :n_cond] = True
        else:
            allowed[q, :n_cond] = True
            allowed[q, n_cond:q + 1] = True
    return np.where(allowed, 0.0, _NEG_MASK).astype(np.float32)


class _Block:
    """Pre-norm attention + MLP residual block."""

    def __init__(self, cfg: ArConfig, rng: Rng, prefix: str):
        w = cfg.width
        self.cfg = cfg
        self.prefix = prefix
        self.ln1_g, self.ln1_b = _ones(w), _zeros(w)
        self.ln2_g, self.ln2_b = _ones(w), _zeros(w)
        self.wq, self.bq = _init_weight(rng.derive(1), w, w), _zeros(w)
        self.wk, self.bk = _init_weight(rng.derive(2), w, w), _zeros(w)
        self.wv, self.bv = _init_weight(rng.derive(3), w, w), _zeros(w)
        self.wo, self.bo = _init_weight(rng.derive(4), w, w), _zeros(w)
        self.w1, self.b1 = _init_weight(rng.derive(5), w, 4 * w), _zeros(4 * w)
        self.w2, self.b2 = _init_weight(rng.derive(6), 4 * w, w), _zeros(w)

    def params(self) -> dict[str, T.Tensor]:
        names = ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "wq", "bq", "wk", "bk",
                 "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")
        return {self.prefix + n: getattr(self, n) for n in names}

    def _split_heads(self, x: T.Tensor, b: int, s: int) -> T.Tensor:
        h = self.cfg.heads
        hd = self.cfg.width // h
        return T.reshape(T.transpose(T.reshape(x, (b, s, h, hd)), (0, 2, 1, 3)),
                         (b * h, s, hd))

    def _merge_heads(self, x: T.Tensor, b: int, s: int) -> T.Tensor:
        h = self.cfg.heads
        hd = self.cfg.width // h
        return T.reshape(T.transpose(T.reshape(x, (b, h, s, hd)), (0, 2, 1, 3)),
                         (b, s, self.cfg.width))

    def __call__(self, x: T.Tensor, mask: np.ndarray) -> T.Tensor:
        b, s, w = x.shape
        h = self.cfg.heads
        hd = w // h
        xn = T.layer_norm(x, self.ln1_g, self.ln1_b)
        q = self._split_heads(T.bias_add(T.matmul(xn, self.wq), self.bq), b, s)
        k = self._split_heads(T.bias_add(T.matmul(xn, self.wk), self.bk), b, s)
        v = self._split_heads(T.bias_add(T.matmul(xn, self.wv), self.bv), b, s)
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / hd ** 0.5)
        tiled = np.ascontiguousarray(np.broadcast_to(mask[:s, :s], (b * h, s, s)))
        att = T.softmax(T.add(scores, T.constant(tiled)), axis=-1)
        ctx = self._merge_heads(T.matmul(att, v), b, s)
        x = T.add(x, T.bias_add(T.matmul(ctx, self.wo), self.bo))
        xn = T.layer_norm(x, self.ln2_g, self.ln2_b)
        mlp = T.bias_add(T.matmul(T.gelu(T.bias_add(T.matmul(xn, self.w1), self.b1)),
                                  self.w2), self.b2)
        return T.add(x, mlp)


class ARModel:
    """Token embedding, stacked blocks, and an image-code output head."""

    def __init__(self, cfg: ArConfig, codebook_size: int, n_tokens: int, rng: Rng):
        if cfg.width % cfg.heads != 0:
            raise ValueError("width %d not divisible by heads %d"
                             % (cfg.width, cfg.heads))
        self.cfg = cfg
        self.k_img = codebook_size
        self.n_tokens = n_tokens
        self.start_id = 2 * codebook_size
        self.vocab = 2 * codebook_size + 1
        self.seq_len = 2 * n_tokens + 1
        self.tok_emb = _init_weight(rng.derive(1), self.vocab, cfg.width)
        self.pos_emb = _init_weight(rng.derive(2), self.seq_len, cfg.width)
        self.blocks = [_Block(cfg, rng.derive(10 + i), "block%d." % i)
                       for i in range(cfg.blocks)]
        self.lnf_g, self.lnf_b = _ones(cfg.width), _zeros(cfg.width)
        # Zero head: an untrained model is exactly uniform over image codes.
        self.head_w = _zeros(cfg.width, codebook_size)
        self.head_b = _zeros(codebook_size)
        self.mask = build_attention_mask(n_tokens, self.seq_len)

    def params(self) -> dict[str, T.Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
               "lnf_g": self.lnf_g, "lnf_b": self.lnf_b,
               "head_w": self.head_w, "head_b": self.head_b}
        for blk in self.blocks:
            out.update(blk.params())
        return out

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise ValueError("parameter names do not match: missing %s, extra %s"
                             % (missing, extra))
        for name, t in own.items():
            arr = tensors[name].astype(np.float32)
            if arr.shape != t.data.shape:
                raise ValueError("shape mismatch for %r: %s vs %s"
                                 % (name, arr.shape, t.data.shape))
            t.data = arr

    def assemble_tokens(self, cond_tokens: np.ndarray,
                        image_prefix: np.ndarray) -> np.ndarray:
        """Pack [condition + offset][start][image prefix] rows, validating ranges."""
        cond = np.atleast_2d(np.asarray(cond_tokens, dtype=np.int64))
        prefix = np.asarray(image_prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None, :] if prefix.size else prefix.reshape(1, 0)
        bsz = cond.shape[0]
        if cond.shape[1] != self.n_tokens:
            raise ValueError("expected %d condition tokens, got %d"
                             % (self.n_tokens, cond.shape[1]))
        if prefix.shape[0] != bsz or prefix.shape[1] > self.n_tokens:
            raise ValueError("image prefix shape %s incompatible with batch %d"
                             % (prefix.shape, bsz))
        for name, arr in (("condition", cond), ("image", prefix)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.k_img):
                raise ValueError("%s token out of range [0, %d)" % (name, self.k_img))
        start = np.full((bsz, 1), self.start_id, dtype=np.int64)
        return np.concatenate([cond + self.k_img, start, prefix], axis=1)

    def forward_tokens(self, tokens: np.ndarray, embed_fn=None) -> T.Tensor:
        """Logits for each predictable image position, shape (B, m, K)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        bsz, s = tokens.shape
        if not (self.n_tokens + 1 <= s <= self.seq_len):
            raise ValueError("sequence length %d outside [%d, %d]"
                             % (s, self.n_tokens + 1, self.seq_len))
        if embed_fn is None:
            emb = T.embedding_gather(self.tok_emb, tokens)
        else:
            emb = embed_fn(self.tok_emb, tokens)
        pos = T.embedding_gather(self.pos_emb,
                                 np.broadcast_to(np.arange(s), (bsz, s)))
        h = T.add(emb, pos)
        for blk in self.blocks:
            h = blk(h, self.mask)
        h = T.layer_norm(h, self.lnf_g, self.lnf_b)
        m = min(s - self.n_tokens, self.n_tokens)
        region = T.slice_(h, (slice(None), slice(self.n_tokens, self.n_tokens + m),
                              slice(None)))
        return T.bias_add(T.matmul(region, self.head_w), self.head_b)


def ar_forward(model: ARModel, cond_tokens: np.ndarray,
               image_prefix: np.ndarray, embed_fn=None) -> T.Tensor:
    """Logits over image codes given the condition and a generated prefix."""
    return model.forward_tokens(model.assemble_tokens(cond_tokens, image_prefix),
                                embed_fn=embed_fn)


def teacher_loss(model: ARModel, cond_tokens: np.ndarray,
                 image_tokens: np.ndarray) -> T.Tensor:
    """Recorded mean NLL of gold image tokens under teacher forcing."""
    image_tokens = np.atleast_2d(np.asarray(image_tokens, dtype=np.int64))
    logits = ar_forward(model, cond_tokens, image_tokens)
    return T.cross_entropy_loss(logits, image_tokens)


def nll(model: ARModel, cond_tokens: np.ndarray, image_tokens: np.ndarray) -> float:
    """Teacher-forced mean NLL per position, without touching the tape."""
    with T.no_grad():
        return float(teacher_loss(model, cond_tokens, image_tokens).data)


def sample_topk(probs: np.ndarray, k: int, temperature: float, rng: Rng) -> int:
    """Draw a code from the k most likely, temperature applied to log-probs.

    Ties are broken toward the lower code id, so k=1 is a deterministic argmax.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be 1D, got shape %s" % (p.shape,))
    if not 1 <= k <= p.size:
        raise ValueError("k must be in [1, %d], got %d" % (p.size, k))
    if temperature <= 0.0:
        raise ValueError("temperature must be positive, got %g" % temperature)
    if np.min(p) < 0.0 or abs(float(np.sum(p)) - 1.0) > 1e-3:
        raise ValueError("probs must be a normalized distribution")
    logits = np.log(p + 1e-12) / temperature
    order = np.argsort(-logits, kind="stable")[:k]
    if k == 1:
        return int(order[0])
    w = np_softmax(logits[order])
    cum = np.cumsum(w)
    cum[-1] = 1.0
    j = int(np.searchsorted(cum, rng.uniform(), side="right"))
    return int(order[min(j, k - 1)])


def generate_batch(model: ARModel, cond_tokens: np.ndarray, rng: Rng,
                   k: int, temperature: float) -> np.ndarray:
    """Autoregressively sample image token grids, one row per condition.

    Draws happen in row order within each position, so results are a pure
    function of (model, conditions, rng stream).
    """
    cond = np.atleast_2d(np.asarray(cond_tokens, dtype=np.int64))
    bsz = cond.shape[0]
    out = np.zeros((bsz, 0), dtype=np.int64)
    with T.no_grad():
        for _ in range(model.n_tokens):
            logits = ar_forward(model, cond, out).data
            probs = np_softmax(logits[:, -1, :])
            picks = [sample_topk(probs[b], k, temperature, rng) for b in range(bsz)]
            out = np.concatenate([out, np.array(picks, dtype=np.int64)[:, None]],
                                 axis=1)
    return out


def generate(model: ARModel, cond_tokens: np.ndarray, rng: Rng,
             k: int, temperature: float) -> np.ndarray:
    """Single-condition convenience wrapper around generate_batch."""
    return generate_batch(model, np.asarray(cond_tokens)[None, :], rng,
                          k, temperature)[0]


def free_running_nll(model: ARModel, cond_tokens: np.ndarray,
                     gold_tokens: np.ndarray, rng: Rng,
                     k: int, temperature: float) -> float:
    """Mean NLL of gold tokens while the model consumes its own samples.

    Scores each position against gold, then feeds the sampled token back as
    input.  The gap between this and the teacher-forced NLL is the cost of
    conditioning on generated instead of gold context.
    """
    cond = np.atleast_2d(np.asarray(cond_tokens, dtype=np.int64))
    gold = np.atleast_2d(np.asarray(gold_tokens, dtype=np.int64))
    bsz = cond.shape[0]
    prefix = np.zeros((bsz, 0), dtype=np.int64)
    total = 0.0
    with T.no_grad():
        for t in range(model.n_tokens):
            logits = ar_forward(model, cond, prefix).data
            probs = np_softmax(logits[:, -1, :])
            total += float(-np.log(probs[np.arange(bsz), gold[:, t]] + 1e-12).sum())
            picks = [sample_topk(probs[b], k, temperature, rng) for b in range(bsz)]
            prefix = np.concatenate(
                [prefix, np.array(picks, dtype=np.int64)[:, None]], axis=1)
    return total / (bsz * model.n_tokens)
