"""Synthetic paired image/condition dataset and its binary container.

Each sample is a 16x16 grayscale image of one to three axis-aligned
rectangles and discs, plus a condition grid derived deterministically from
the same shapes: either the shape outlines as a binary edge map, or a
per-shape integer label map.

Shape geometry is drawn from a small pool of fixed layouts while intensities
are drawn fresh per sample, so one condition corresponds to many images; that
one-to-many structure is what the generative stages are exercised on.

Generation is pure per (seed, index): every sample has its own derived
stream, so regenerating any single index gives identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng, derive_seed

GRID = 16

_MODE_CODES = {"edge": 0, "segment": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

# Stream tags keeping geometry and per-sample draws independent.
_GEOMETRY_STREAM = 0x47454F4D
_SAMPLE_STREAM = 0x53414D50


class DatasetFormatError(ValueError):
    """Container bytes do not parse as a dataset."""


@dataclass
class DatasetSpec:
    n_samples: int = 512
    seed: int = 0
    mode: str = "edge"
    shape_min: int = 1
    shape_max: int = 3
    intensity_min: float = 0.25
    intensity_max: float = 1.0
    geometry_pool: int = 64

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError("mode must be one of %s, got %r"
                             % (sorted(_MODE_CODES), self.mode))
        if not (1 <= self.shape_min <= self.shape_max):
            raise ValueError("need 1 <= shape_min <= shape_max")
        if self.geometry_pool < 1:
            raise ValueError("geometry_pool must be positive")


@dataclass
class PairedSample:
    image: np.ndarray
    condition: np.ndarray
    mode: str = "edge"


@dataclass
class _Shape:
    kind: str                      # "rect" or "disc"
    params: tuple[int, ...]        # rect: (y0, x0, h, w); disc: (cy, cx, r)

    def mask(self) -> np.ndarray:
        m = np.zeros((GRID, GRID), dtype=bool)
        if self.kind == "rect":
            y0, x0, h, w = self.params
            m[y0:y0 + h, x0:x0 + w] = True
        else:
            cy, cx, r = self.params
            yy, xx = np.mgrid[0:GRID, 0:GRID]
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        return m


def _shape_outline(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask whose 4-neighborhood leaves the mask."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~(interior & mask)


def _pool_geometry(spec: DatasetSpec, pool_index: int) -> list[_Shape]:
    """Fixed shape layout for one pool entry, derived only from (seed, index)."""
    rng = Rng(derive_seed(spec.seed, _GEOMETRY_STREAM, pool_index))
    count = spec.shape_min + rng.randint(spec.shape_max - spec.shape_min + 1)
    shapes = []
    for _ in range(count):
        if rng.randint(2) == 0:
            h = 3 + rng.randint(6)
            w = 3 + rng.randint(6)
            y0 = rng.randint(GRID - h + 1)
            x0 = rng.randint(GRID - w + 1)
            shapes.append(_Shape("rect", (y0, x0, h, w)))
        else:
            r = 2 + rng.randint(4)
            cy = r + rng.randint(GRID - 2 * r)
            cx = r + rng.randint(GRID - 2 * r)
            shapes.append(_Shape("disc", (cy, cx, r)))
    return shapes


def _condition_grid(shapes: list[_Shape], mode: str) -> np.ndarray:
    cond = np.zeros((GRID, GRID), dtype=np.float32)
    if mode == "edge":
        for s in shapes:
            cond[_shape_outline(s.mask())] = 1.0
    else:
        # Later shapes paint over earlier ones, matching the image layering.
        for label, s in enumerate(shapes, start=1):
            cond[s.mask()] = float(label)
    return cond


def generate_sample(rng: Rng, spec: DatasetSpec) -> PairedSample:
    """One paired sample; ``rng`` supplies the layout choice and intensities."""
    pool_index = rng.randint(spec.geometry_pool)
    shapes = _pool_geometry(spec, pool_index)
    image = np.zeros((GRID, GRID), dtype=np.float32)
    lo, hi = spec.intensity_min, spec.intensity_max
    for s in shapes:
        intensity = lo + (hi - lo) * rng.uniform()
        image[s.mask()] = np.float32(intensity)
    return PairedSample(image=image,
                        condition=_condition_grid(shapes, spec.mode),
                        mode=spec.mode)


def generate_dataset(spec: DatasetSpec) -> list[PairedSample]:
    out = []
    for i in range(spec.n_samples):
        rng = Rng(derive_seed(spec.seed, _SAMPLE_STREAM, i))
        out.append(generate_sample(rng, spec))
    return out


# ---------------------------------------------------------------------------
# Container format: magic "IQDS", version u32, count u32, then per sample a
# mode byte and two 256-float32 grids (image, condition), all little-endian.

_MAGIC = b"IQDS"
_VERSION = 1
_HEADER = struct.Struct("<4sII")
_GRID_BYTES = GRID * GRID * 4
_SAMPLE_BYTES = 1 + 2 * _GRID_BYTES


def save_dataset(samples: list[PairedSample], path: str) -> None:
    parts = [_HEADER.pack(_MAGIC, _VERSION, len(samples))]
    for s in samples:
        if s.image.shape != (GRID, GRID) or s.condition.shape != (GRID, GRID):
            raise ValueError("samples must be %dx%d grids" % (GRID, GRID))
        parts.append(struct.pack("<B", _MODE_CODES[s.mode]))
        parts.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.condition, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_dataset(path: str) -> list[PairedSample]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("file too short for header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise DatasetFormatError("bad magic %r" % magic)
    if version != _VERSION:
        raise DatasetFormatError("unsupported version %d" % version)
    expected = _HEADER.size + count * _SAMPLE_BYTES
    if len(blob) != expected:
        raise DatasetFormatError(
            "size mismatch: %d samples need %d bytes, file has %d"
            % (count, expected, len(blob)))
    samples = []
    off = _HEADER.size
    for _ in range(count):
        mode_code = blob[off]
        if mode_code not in _MODE_NAMES:
            raise DatasetFormatError("unknown mode byte %d" % mode_code)
        off += 1
        image = np.frombuffer(blob, dtype="<f4", count=GRID * GRID, offset=off)
        off += _GRID_BYTES
        cond = np.frombuffer(blob, dtype="<f4", count=GRID * GRID, offset=off)
        off += _GRID_BYTES
        samples.append(PairedSample(
            image=image.reshape(GRID, GRID).astype(np.float32),
            condition=cond.reshape(GRID, GRID).astype(np.float32),
            mode=_MODE_NAMES[mode_code]))
    return samples
