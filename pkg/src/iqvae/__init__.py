"""Quantized paired autoencoding with transport-aligned latents and a
scheduled-sampling autoregressor, on a self-contained tape autodiff engine.

Subpackages by layer: ``rng`` (deterministic streams), ``tensor`` (autodiff
and AdamW), ``ot`` (exact and sliced transport costs), ``data`` (synthetic
paired grids and their container), ``vae`` (quantized autoencoder), ``ar``
(conditional transformer), ``gumbel`` (scheduled-sampling training),
``checkpoint``/``config`` (file formats), ``cli`` (command-line harness).
"""

__version__ = "0.1.0"
