"""Vector-quantized paired autoencoder with a transport-aligned latent loss.

Two patch encoders map a 16x16 image and its condition grid to 16 latent
tokens each.  Both latent sets are quantized against their own learnable
codebook.  The image decoder sees the quantized image tokens concatenated
with the continuous (pre-quantization) condition latents; a second small
decoder reconstructs the condition from its quantized tokens so the condition
codebook also learns.

The training loss is

    lambda_reg  * sliced transport cost between the two continuous latent sets
  + lambda_recon * (image MSE + condition MSE)
  + lambda_quant * (both commitment losses)

Quantization is straight-through: downstream gradients skip the
nearest-neighbor lookup and land on the encoder output, while the codebook
itself learns from the first commitment term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ot
from . import tensor as T
from .config import RunConfig, VaeConfig
from .data import GRID, PairedSample
from .rng import Rng, derive_seed


class TrainingDiverged(RuntimeError):
    """Loss left the finite domain; training cannot continue."""


def _init_linear(rng: Rng, fan_in: int, fan_out: int) -> tuple[T.Tensor, T.Tensor]:
    scale = (2.0 / fan_in) ** 0.5
    w = rng.normals(fan_in * fan_out).reshape(fan_in, fan_out) * scale
    return (T.Tensor(w.astype(np.float32), requires_grad=True),
            T.Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True))


def patchify(grids: np.ndarray, patch: int) -> np.ndarray:
    """(N, G, G) grids to (N, tokens, patch*patch) rows, row-major patch order."""
    n, g, g2 = grids.shape
    if g != g2 or g % patch != 0:
        raise ValueError("grids must be square with side divisible by %d" % patch)
    s = g // patch
    x = grids.reshape(n, s, patch, s, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(n, s * s, patch * patch)


def unpatchify(tokens: np.ndarray, patch: int) -> np.ndarray:
    """Inverse of patchify."""
    n, t, p = tokens.shape
    s = int(round(t ** 0.5))
    x = tokens.reshape(n, s, s, patch, patch)
    return x.transpose(0, 1, 3, 2, 4).reshape(n, s * patch, s * patch)


class _Mlp:
    """Three linear layers with gelu between, optional sigmoid output."""

    def __init__(self, rng: Rng, dims: tuple[int, int, int, int], prefix: str,
                 sigmoid_out: bool):
        self.prefix = prefix
        self.sigmoid_out = sigmoid_out
        self.w1, self.b1 = _init_linear(rng, dims[0], dims[1])
        self.w2, self.b2 = _init_linear(rng, dims[1], dims[2])
        self.w3, self.b3 = _init_linear(rng, dims[2], dims[3])

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = T.gelu(T.bias_add(T.matmul(x, self.w1), self.b1))
        h = T.gelu(T.bias_add(T.matmul(h, self.w2), self.b2))
        out = T.bias_add(T.matmul(h, self.w3), self.b3)
        return T.sigmoid(out) if self.sigmoid_out else out

    def params(self) -> dict[str, T.Tensor]:
        return {self.prefix + n: t for n, t in
                (("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                 ("b2", self.b2), ("w3", self.w3), ("b3", self.b3))}


@dataclass
class QuantizeResult:
    indices: np.ndarray      # (B, T) int64 codebook rows
    quantized: T.Tensor      # (B, T, d) straight-through codebook rows
    commit_loss: T.Tensor    # scalar


def nearest_codes(flat_z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row per latent; ties go to the lowest row."""
    d2 = (np.sum(flat_z * flat_z, axis=1, keepdims=True)
          - 2.0 * flat_z @ codebook.T
          + np.sum(codebook * codebook, axis=1))
    return np.argmin(d2, axis=1)


def quantize(z: T.Tensor, codebook: T.Tensor, beta_commit: float) -> QuantizeResult:
    """Snap latents to their nearest codebook rows.

    The returned quantized tensor passes gradients straight through to ``z``.
    The commitment loss is the codebook-pull term plus ``beta_commit`` times
    the encoder-pull term; only the first reaches the codebook.
    """
    b, t, d = z.shape
    flat = z.data.reshape(-1, d)
    idx = nearest_codes(flat, codebook.data).reshape(b, t)
    gathered = codebook.data[idx]
    quantized = T.apply_op("st_quantize", (z,), gathered.copy(), lambda g: (g,))
    pull_codebook = T.mse_loss(T.embedding_gather(codebook, idx), T.constant(z.data.copy()))
    pull_encoder = T.mse_loss(z, T.constant(gathered))
    commit = T.add(pull_codebook, T.scalar_mul(pull_encoder, beta_commit))
    return QuantizeResult(indices=idx, quantized=quantized, commit_loss=commit)


def dequantize(indices: np.ndarray, codebook: T.Tensor) -> T.Tensor:
    """Exact codebook row gather; out-of-range indices raise."""
    return T.embedding_gather(codebook, np.asarray(indices))


class VaeModel:
    """Encoders, codebooks, and decoders as one named-parameter bundle."""

    def __init__(self, cfg: VaeConfig, rng: Rng):
        self.cfg = cfg
        p = cfg.patch * cfg.patch
        d, h = cfg.embed_dim, cfg.hidden_dim
        self.enc_image = _Mlp(rng.derive(1), (p, h, h, d), "enc_image.", False)
        self.enc_cond = _Mlp(rng.derive(2), (p, h, h, d), "enc_cond.", False)
        self.dec_image = _Mlp(rng.derive(3), (2 * d, h, h, p), "dec_image.", True)
        self.dec_cond = _Mlp(rng.derive(4), (d, h, h, p), "dec_cond.", True)
        cb_rng = rng.derive(5)
        self.codebook_image = T.Tensor(
            (cb_rng.normals(cfg.codebook_size * d).reshape(cfg.codebook_size, d)
             * (1.0 / d ** 0.5)).astype(np.float32), requires_grad=True)
        self.codebook_cond = T.Tensor(
            (cb_rng.normals(cfg.codebook_size * d).reshape(cfg.codebook_size, d)
             * (1.0 / d ** 0.5)).astype(np.float32), requires_grad=True)

    def params(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for m in (self.enc_image, self.enc_cond, self.dec_image, self.dec_cond):
            out.update(m.params())
        out["codebook_image"] = self.codebook_image
        out["codebook_cond"] = self.codebook_cond
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

    def encode_image(self, patches: T.Tensor) -> T.Tensor:
        return self.enc_image(patches)

    def encode_condition(self, patches: T.Tensor) -> T.Tensor:
        return self.enc_cond(patches)

    def decode_image(self, quantized_image: T.Tensor, cond_latents: T.Tensor) -> T.Tensor:
        return self.dec_image(T.concat([quantized_image, cond_latents], axis=2))

    def decode_condition(self, quantized_cond: T.Tensor) -> T.Tensor:
        return self.dec_cond(quantized_cond)


def variational_regularizer(z_cond: T.Tensor, z_image: T.Tensor,
                            directions: np.ndarray) -> T.Tensor:
    """Sliced transport cost between the flattened continuous latent sets."""
    b, t, d = z_cond.shape
    return ot.sliced_gw_t(T.reshape(z_cond, (b * t, d)),
                          T.reshape(z_image, (b * t, d)), directions)


def iqvae_loss(model: VaeModel, image_patches: np.ndarray, cond_patches: np.ndarray,
               directions: np.ndarray) -> tuple[T.Tensor, dict[str, float], dict[str, np.ndarray]]:
    """Composite loss on one batch; also returns components and code indices."""
    cfg = model.cfg
    x = T.constant(image_patches)
    c = T.constant(cond_patches)
    z_img = model.encode_image(x)
    z_cond = model.encode_condition(c)

    q_img = quantize(z_img, model.codebook_image, cfg.beta_commit)
    q_cond = quantize(z_cond, model.codebook_cond, cfg.beta_commit)

    recon_img = model.decode_image(q_img.quantized, z_cond)
    recon_cond = model.decode_condition(q_cond.quantized)
    l_recon = T.add(T.mse_loss(recon_img, x), T.mse_loss(recon_cond, c))

    l_reg = variational_regularizer(z_cond, z_img, directions)
    l_quant = T.add(q_img.commit_loss, q_cond.commit_loss)

    total = T.add(T.add(T.scalar_mul(l_reg, cfg.lambda_reg),
                        T.scalar_mul(l_recon, cfg.lambda_recon)),
                  T.scalar_mul(l_quant, cfg.lambda_quant))
    parts = {"l_reg": float(l_reg.data), "l_recon": float(l_recon.data),
             "l_quan": float(l_quant.data), "l_total": float(total.data)}
    codes = {"image": q_img.indices, "cond": q_cond.indices}
    return total, parts, codes


def normalize_conditions(samples: list[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into arrays; condition grids are scaled into [0, 1]."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    conds = np.stack([s.condition for s in samples]).astype(np.float32)
    peak = float(conds.max())
    if peak > 1.0:
        conds = conds / peak
    return images, conds


def _seed_codebooks(model: VaeModel, image_patches: np.ndarray,
                    cond_patches: np.ndarray, rng: Rng) -> None:
    """Initialize codebooks from actual encoder outputs so entries start used."""
    k = model.cfg.codebook_size
    with T.no_grad():
        z_img = model.encode_image(T.constant(image_patches)).data
        z_cond = model.encode_condition(T.constant(cond_patches)).data
    for z, cb in ((z_img, model.codebook_image), (z_cond, model.codebook_cond)):
        flat = z.reshape(-1, z.shape[-1])
        picks = np.array([rng.randint(flat.shape[0]) for _ in range(k)])
        noise = rng.normals(k * flat.shape[1]).reshape(k, -1) * 1e-3
        cb.data = (flat[picks] + noise).astype(np.float32)


def train_iqvae(samples: list[PairedSample], cfg: RunConfig,
                metrics_cb=None) -> tuple[VaeModel, list[dict]]:
    """Fit the autoencoder; returns the model and per-epoch metrics.

    Deterministic given (samples, cfg): ordering, directions, and init all
    come from streams derived from cfg.seed.  A non-finite loss aborts.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    vcfg = cfg.vae
    images, conds = normalize_conditions(samples)
    img_patches = patchify(images, vcfg.patch).astype(np.float32)
    cond_patches = patchify(conds, vcfg.patch).astype(np.float32)
    n = img_patches.shape[0]

    rng = Rng(derive_seed(cfg.seed, 0x56414501))
    model = VaeModel(vcfg, rng.derive(1))
    probe = slice(0, min(n, 8 * vcfg.batch_size))
    _seed_codebooks(model, img_patches[probe], cond_patches[probe], rng.derive(2))

    order_rng = rng.derive(3)
    dir_rng = rng.derive(4)
    params = model.params()
    opt = T.AdamW([params[k] for k in sorted(params)], lr=vcfg.lr,
                  weight_decay=vcfg.weight_decay)

    history = []
    step = 0
    for epoch in range(vcfg.epochs):
        order = list(range(n))
        order_rng.shuffle(order)
        sums = {"l_total": 0.0, "l_reg": 0.0, "l_recon": 0.0, "l_quan": 0.0}
        used_image: set[int] = set()
        used_cond: set[int] = set()
        batches = 0
        for start in range(0, n, vcfg.batch_size):
            batch = order[start:start + vcfg.batch_size]
            if len(batch) < 2:
                continue  # the sliced loss needs at least two points
            directions = ot.sample_directions(dir_rng, vcfg.projections,
                                              vcfg.embed_dim).astype(np.float32)
            T.reset_graph()
            try:
                total, parts, codes = iqvae_loss(
                    model, img_patches[batch], cond_patches[batch], directions)
                T.backward(total)
            except T.NonFiniteError as e:
                raise TrainingDiverged(
                    "autoencoder training diverged at epoch %d step %d: %s"
                    % (epoch, step, e)) from e
            opt.step()
            step += 1
            batches += 1
            for k in sums:
                sums[k] += parts[k]
            used_image.update(np.unique(codes["image"]).tolist())
            used_cond.update(np.unique(codes["cond"]).tolist())
        usage = (len(used_image) + len(used_cond)) / (2.0 * vcfg.codebook_size)
        record = {"epoch": epoch, "codebook_usage": usage}
        record.update({k: sums[k] / max(1, batches) for k in sums})
        history.append(record)
        if metrics_cb is not None:
            metrics_cb(record)
    return model, history


def encode_tokens(model: VaeModel, samples: list[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Quantized token grids for every sample: (condition, image), each (N, 16)."""
    images, conds = normalize_conditions(samples)
    img_patches = patchify(images, model.cfg.patch).astype(np.float32)
    cond_patches = patchify(conds, model.cfg.patch).astype(np.float32)
    with T.no_grad():
        z_img = model.encode_image(T.constant(img_patches)).data
        z_cond = model.encode_condition(T.constant(cond_patches)).data
    d = model.cfg.embed_dim
    img_idx = nearest_codes(z_img.reshape(-1, d), model.codebook_image.data)
    cond_idx = nearest_codes(z_cond.reshape(-1, d), model.codebook_cond.data)
    n = img_patches.shape[0]
    return cond_idx.reshape(n, -1), img_idx.reshape(n, -1)


def reconstruct_images(model: VaeModel, samples: list[PairedSample]) -> np.ndarray:
    """Round-trip images through encode/quantize/decode; returns (N, 16, 16)."""
    images, conds = normalize_conditions(samples)
    img_patches = patchify(images, model.cfg.patch).astype(np.float32)
    cond_patches = patchify(conds, model.cfg.patch).astype(np.float32)
    with T.no_grad():
        z_img = model.encode_image(T.constant(img_patches))
        z_cond = model.encode_condition(T.constant(cond_patches))
        q_img = quantize(z_img, model.codebook_image, model.cfg.beta_commit)
        out = model.decode_image(q_img.quantized, z_cond).data
    return unpatchify(out, model.cfg.patch)


def decode_image_tokens(model: VaeModel, image_tokens: np.ndarray,
                        cond_grids: np.ndarray) -> np.ndarray:
    """Decode sampled image tokens against condition latents.

    ``cond_grids`` must already be scaled to [0, 1] the same way training
    inputs were (see normalize_conditions).
    """
    cond_patches = patchify(cond_grids.astype(np.float32), model.cfg.patch)
    with T.no_grad():
        z_cond = model.encode_condition(T.constant(cond_patches))
        zq = dequantize(image_tokens, model.codebook_image)
        out = model.decode_image(zq, z_cond).data
    return unpatchify(out, model.cfg.patch)


def latent_transport_cost(model: VaeModel, samples: list[PairedSample],
                          projections: int, seed: int) -> float:
    """Evaluation-time sliced cost between the two continuous latent sets."""
    images, conds = normalize_conditions(samples)
    img_patches = patchify(images, model.cfg.patch).astype(np.float32)
    cond_patches = patchify(conds, model.cfg.patch).astype(np.float32)
    with T.no_grad():
        z_img = model.encode_image(T.constant(img_patches)).data
        z_cond = model.encode_condition(T.constant(cond_patches)).data
    d = model.cfg.embed_dim
    dirs = ot.sample_directions(Rng(derive_seed(seed, 0x4C524547)), projections, d)
    return ot.sliced_gw(z_cond.reshape(-1, d), z_img.reshape(-1, d), dirs)
