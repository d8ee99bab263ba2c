"""Scheduled sampling for the autoregressor via Gumbel-relaxed resampling.

Teacher forcing never shows the model its own mistakes; this module closes
that train/test gap on every n-th step with a two-pass scheme:

  pass 1: forward on the gold sequence, yielding the model's per-position
          predictive distributions;
  pass 2: forward on a mixed sequence where some gold input tokens are
          replaced by the argmax of a Gumbel-relaxed sample from pass 1,
          scored against the *gold* targets.  Only pass 2 is backpropagated.

When the schedule replaces nothing, pass 1 already is the teacher-forced
loss, so its graph is reused and the second forward is skipped; the extra
cost of the mechanism is then just the replacement bookkeeping.

A position is only eligible for replacement when the model's prediction is
reliable: the probability-weighted cosine similarity between predicted codes
and the gold code (computed over row-normalized codebook embeddings) must
clear a threshold.  Eligible positions are then swapped with a probability
that ramps linearly from 0 to its cap over the first half of training, while
the relaxation temperature anneals exponentially.

Replaced inputs are straight-through: the hard token id feeds the embedding
lookup forward, and the backward pass spreads the embedding gradient over
image-code rows weighted by the relaxed sample.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .ar import ARModel, ar_forward, np_softmax, teacher_loss
from .config import GumbelConfig, RunConfig
from .rng import Rng, derive_seed
from .vae import TrainingDiverged

_CLAMP = 1e-12
_LOG_EPS = 1e-12


def gumbel_noise(rng: Rng, count: int) -> np.ndarray:
    """Standard Gumbel draws, -log(-log U), with U clamped off both endpoints."""
    u = np.clip(rng.uniforms(count), _CLAMP, 1.0 - _CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(probs: T.Tensor, tau: float, noise: np.ndarray) -> T.Tensor:
    """Relaxed one-hot sample: softmax((log(p + eps) + g) / tau).

    Differentiable with respect to ``probs``; the noise is a fixed constant.
    """
    if tau <= 0.0:
        raise ValueError("temperature must be positive, got %g" % tau)
    if noise.shape != probs.shape:
        raise T.ShapeError("noise shape %s does not match probs %s"
                           % (noise.shape, probs.shape))
    eps = T.constant(np.full(probs.shape, _LOG_EPS, dtype=probs.data.dtype))
    shifted = T.add(T.log(T.add(probs, eps)),
                    T.constant(noise.astype(probs.data.dtype)))
    return T.softmax(T.scalar_mul(shifted, 1.0 / tau), axis=-1)


def reliability(probs: np.ndarray, codebook: np.ndarray,
                gold: np.ndarray) -> np.ndarray:
    """Probability-weighted similarity of predicted codes to the gold code.

    ``probs`` is (n, K) over image codes, ``gold`` the (n,) gold code ids.
    Codebook rows are L2-normalized first; a zero-norm row is an error.
    Raw values lie in [-1, 1] and are clamped to [0, 1].
    """
    p = np.asarray(probs, dtype=np.float64)
    cb = np.asarray(codebook, dtype=np.float64)
    gold = np.asarray(gold)
    norms = np.linalg.norm(cb, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("codebook contains a zero-norm row")
    cbn = cb / norms[:, None]
    sims = cbn @ cbn.T
    raw = np.sum(p * sims[gold], axis=1)
    return np.clip(raw, 0.0, 1.0)


def tau_schedule(step: int, total_steps: int, start: float, end: float) -> float:
    """Exponential anneal from ``start`` at step 0 to ``end`` at the last step."""
    if start <= 0.0 or end <= 0.0:
        raise ValueError("temperatures must be positive")
    frac = min(1.0, step / max(1, total_steps - 1))
    return float(start * (end / start) ** frac)


def mix_schedule(step: int, total_steps: int, mix_max: float) -> float:
    """Replacement probability: linear 0 to mix_max over the first half, then flat."""
    half = max(1, total_steps // 2)
    return mix_max * min(1.0, step / half)


def _mixed_embedding(tokens: np.ndarray, replaced: np.ndarray,
                     relaxed: np.ndarray):
    """Embedding function with straight-through gradients at replaced positions.

    Forward is a plain row gather of the hard tokens.  Backward routes the
    gradient of a replaced position onto the image-code embedding rows in
    proportion to its relaxed sample, instead of onto the single hard row.
    """
    def embed(table: T.Tensor, toks: np.ndarray) -> T.Tensor:
        out = table.data[toks]
        k = relaxed.shape[-1]

        def bwd(g):
            gt = np.zeros_like(table.data)
            hard = ~replaced
            np.add.at(gt, toks[hard].reshape(-1), g[hard].reshape(-1, g.shape[-1]))
            if replaced.any():
                y = relaxed[replaced]          # (M, K)
                gr = g[replaced]               # (M, W)
                gt[:k] += (y.T @ gr).astype(gt.dtype)
            return (gt,)

        return T.apply_op("st_mixed_embed", (table,), out, bwd)

    return embed


def two_pass_step(model: ARModel, cond_tokens: np.ndarray,
                  gold_tokens: np.ndarray, codebook: np.ndarray,
                  gcfg: GumbelConfig, step: int, total_steps: int,
                  rng: Rng) -> tuple[T.Tensor, dict[str, float]]:
    """One training loss with scheduled-sampling mixing when the step is due.

    Off-cycle steps (and disabled configs) return the plain teacher-forced
    loss.  The loss always scores the gold targets; mixing only alters the
    input context.
    """
    cond = np.atleast_2d(np.asarray(cond_tokens, dtype=np.int64))
    gold = np.atleast_2d(np.asarray(gold_tokens, dtype=np.int64))
    stats = {"gumbel_step": 0.0, "gumbel_active_positions": 0.0,
             "mean_reliability": 0.0}
    due = gcfg.enabled and gcfg.every > 0 and step % gcfg.every == 0
    if not due:
        return teacher_loss(model, cond, gold), stats
    stats["gumbel_step"] = 1.0

    # Recorded gold-context forward: it drives the replacement decisions and
    # doubles as the loss when no replacement fires.
    bsz, n = gold.shape
    logits1 = ar_forward(model, cond, gold)
    probs = np_softmax(logits1.data)                             # (B, n, K)
    k = probs.shape[-1]
    rel = reliability(probs.reshape(bsz * n, k), codebook,
                      gold.reshape(-1)).reshape(bsz, n)
    stats["mean_reliability"] = float(rel.mean())

    tau = tau_schedule(step, total_steps, gcfg.tau_start, gcfg.tau_end)
    mix_prob = mix_schedule(step, total_steps, gcfg.mix_max)

    mixed = gold.copy()
    replaced_img = np.zeros((bsz, n), dtype=bool)
    relaxed_img = np.zeros((bsz, n, k), dtype=np.float32)
    # The final image token is input only for a position past the grid; it has
    # no gradient path, so it is never replaced.
    for b in range(bsz):
        for i in range(n - 1):
            if rel[b, i] < gcfg.threshold:
                continue
            if rng.uniform() >= mix_prob:
                continue
            noise = gumbel_noise(rng, k)
            y = np_softmax((np.log(probs[b, i] + _LOG_EPS) + noise) / tau)
            mixed[b, i] = int(np.argmax(y))
            relaxed_img[b, i] = y.astype(np.float32)
            replaced_img[b, i] = True
    stats["gumbel_active_positions"] = float(replaced_img.sum())
    if not replaced_img.any():
        return T.cross_entropy_loss(logits1, gold), stats

    tokens = model.assemble_tokens(cond, mixed)
    # Map image-position flags onto sequence positions (offset: cond + start).
    replaced = np.zeros(tokens.shape, dtype=bool)
    relaxed = np.zeros(tokens.shape + (k,), dtype=np.float32)
    replaced[:, model.n_tokens + 1:] = replaced_img
    relaxed[:, model.n_tokens + 1:, :] = relaxed_img
    logits2 = model.forward_tokens(
        tokens, embed_fn=_mixed_embedding(tokens, replaced, relaxed))
    return T.cross_entropy_loss(logits2, gold), stats


def train_ar(cond_tokens: np.ndarray, image_tokens: np.ndarray,
             codebook: np.ndarray, cfg: RunConfig, gumbel_enabled: bool,
             metrics_cb=None) -> tuple[ARModel, list[dict]]:
    """Fit the autoregressor on token grids; returns model and epoch metrics.

    ``codebook`` is the image codebook used for reliability gating.  The
    metrics stream carries the teacher NLL of each epoch plus how many inputs
    were resampled and the mean reliability seen on mixing steps.
    """
    acfg = cfg.ar
    cond = np.asarray(cond_tokens, dtype=np.int64)
    gold = np.asarray(image_tokens, dtype=np.int64)
    n = cond.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty token set")
    gcfg = dataclasses.replace(cfg.gumbel, enabled=gumbel_enabled)

    rng = Rng(derive_seed(cfg.seed, 0x41520001))
    model = ARModel(acfg, codebook.shape[0], cond.shape[1], rng.derive(1))
    order_rng = rng.derive(2)
    mix_rng = rng.derive(3)
    params = model.params()
    opt = T.AdamW([params[key] for key in sorted(params)], lr=acfg.lr,
                  weight_decay=acfg.weight_decay)

    steps_per_epoch = max(1, (n + acfg.batch_size - 1) // acfg.batch_size)
    total_steps = acfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(acfg.epochs):
        order = list(range(n))
        order_rng.shuffle(order)
        loss_sum = 0.0
        active = 0.0
        rel_sum = 0.0
        rel_steps = 0
        batches = 0
        for start_idx in range(0, n, acfg.batch_size):
            batch = order[start_idx:start_idx + acfg.batch_size]
            T.reset_graph()
            try:
                loss, stats = two_pass_step(model, cond[batch], gold[batch],
                                            codebook, gcfg, step, total_steps,
                                            mix_rng)
                T.backward(loss)
            except T.NonFiniteError as e:
                raise TrainingDiverged(
                    "autoregressor training diverged at epoch %d step %d: %s"
                    % (epoch, step, e)) from e
            opt.step()
            loss_sum += float(loss.data)
            active += stats["gumbel_active_positions"]
            if stats["gumbel_step"]:
                rel_sum += stats["mean_reliability"]
                rel_steps += 1
            step += 1
            batches += 1
        record = {
            "epoch": epoch,
            "nll": loss_sum / max(1, batches),
            "gumbel_active_positions": active,
            "mean_reliability": rel_sum / rel_steps if rel_steps else 0.0,
        }
        history.append(record)
        if metrics_cb is not None:
            metrics_cb(record)
    return model, history
