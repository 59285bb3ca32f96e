"""Batch image augmentations on NHWC arrays, plus crop-retention geometry.

Every random transform draws one parameter set per batch element and applies
it to all stacked frames of that element.  The ``apply_*`` helpers take the
parameters explicitly so the same transform can be replayed on relevance
masks (any array whose first three axes are batch, row, column).
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from replab.errors import ValidationError

KINDS = ("crop", "shift", "flip", "rotate", "intensity")


def _rng(seed):
    return np.random.default_rng(seed)


def apply_crop(batch, offsets, out):
    """``offsets[i] = (dx, dy)``: column and row of the window's top-left."""
    batch = np.asarray(batch)
    result = np.empty((batch.shape[0], out, out, *batch.shape[3:]), dtype=batch.dtype)
    for i, (dx, dy) in enumerate(offsets):
        result[i] = batch[i, dy : dy + out, dx : dx + out]
    return result


def random_crop(batch, out, seed=None, return_params=False):
    batch = np.asarray(batch)
    size = batch.shape[1]
    if out > size or out > batch.shape[2]:
        raise ValidationError(f"crop size {out} exceeds input size {batch.shape[1:3]}")
    offsets = _rng(seed).integers(0, size - out + 1, size=(batch.shape[0], 2))
    result = apply_crop(batch, offsets, out)
    return (result, offsets) if return_params else result


def center_crop(batch, out):
    batch = np.asarray(batch)
    off = (batch.shape[1] - out) // 2
    return batch[:, off : off + out, off : off + out]


def apply_shift(batch, offsets, pad):
    batch = np.asarray(batch)
    if pad == 0:
        return batch.copy()
    widths = [(0, 0), (pad, pad), (pad, pad)] + [(0, 0)] * (batch.ndim - 3)
    padded = np.pad(batch, widths, mode="edge")
    return apply_crop(padded, offsets, batch.shape[1])


def random_shift(batch, pad, seed=None, return_params=False):
    """Replicate-pad by ``pad`` and crop back to the input size."""
    if pad < 0:
        raise ValidationError("pad must be >= 0")
    batch = np.asarray(batch)
    offsets = _rng(seed).integers(0, 2 * pad + 1, size=(batch.shape[0], 2))
    result = apply_shift(batch, offsets, pad)
    return (result, offsets) if return_params else result


def apply_flip(batch, flags):
    batch = np.asarray(batch)
    result = batch.copy()
    result[flags] = batch[flags][:, :, ::-1]
    return result


def random_flip(batch, p=0.5, seed=None, return_params=False):
    if not 0.0 <= p <= 1.0:
        raise ValidationError("flip probability must lie in [0, 1]")
    batch = np.asarray(batch)
    flags = _rng(seed).random(batch.shape[0]) < p
    result = apply_flip(batch, flags)
    return (result, flags) if return_params else result


def apply_rotate(batch, quarter_turns):
    batch = np.asarray(batch)
    if batch.shape[1] != batch.shape[2]:
        raise ValidationError("rotation needs square images")
    result = np.empty_like(batch)
    for i, k in enumerate(quarter_turns):
        result[i] = np.rot90(batch[i], k=int(k), axes=(0, 1))
    return result


def random_rotate(batch, seed=None, return_params=False):
    """Counter-clockwise rotation by a uniformly drawn multiple of 90 degrees."""
    batch = np.asarray(batch)
    turns = _rng(seed).integers(0, 4, size=batch.shape[0])
    result = apply_rotate(batch, turns)
    return (result, turns) if return_params else result


def apply_intensity(batch, factors):
    batch = np.asarray(batch)
    shape = (-1,) + (1,) * (batch.ndim - 1)
    scaled = batch.astype(np.float64) * np.asarray(factors, dtype=np.float64).reshape(shape)
    if batch.dtype == np.uint8:
        return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return np.clip(scaled, 0.0, 255.0)


def random_intensity(batch, scale, seed=None, return_params=False):
    """Per-sample factor ``1 + scale * clip(z, -2, 2)``, z standard normal."""
    if scale < 0:
        raise ValidationError("intensity scale must be >= 0")
    batch = np.asarray(batch)
    z = np.clip(_rng(seed).standard_normal(batch.shape[0]), -2.0, 2.0)
    factors = 1.0 + scale * z
    result = apply_intensity(batch, factors)
    return (result, factors) if return_params else result


intensity_jitter = random_intensity


@dataclasses.dataclass
class AugmentationSpec:
    kind: str
    out: Optional[int] = None
    pad: int = 4
    p: float = 0.5
    scale: float = 0.05
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown augmentation {self.kind!r}; choose from {KINDS}")
        if self.kind == "crop" and (self.out is None or self.out < 1):
            raise ValidationError("crop augmentation needs a positive out size")
        if self.pad < 0:
            raise ValidationError("shift pad must be >= 0")

    def to_dict(self):
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def output_size(self, in_size):
        return self.out if self.kind == "crop" else in_size

    def __call__(self, batch, rng):
        if self.kind == "crop":
            return random_crop(batch, self.out, rng)
        if self.kind == "shift":
            return random_shift(batch, self.pad, rng)
        if self.kind == "flip":
            return random_flip(batch, self.p, rng)
        if self.kind == "rotate":
            return random_rotate(batch, rng)
        return random_intensity(batch, self.scale, rng)

    def evaluation_view(self, batch):
        """Deterministic counterpart used when acting: center crop or identity."""
        return center_crop(batch, self.out) if self.kind == "crop" else np.asarray(batch)


def augmented_size(specs, in_size):
    size = in_size
    for spec in specs:
        size = spec.output_size(size)
    return size


def apply_all(specs, batch, rng):
    for spec in specs:
        batch = spec(batch, rng)
    return batch


def evaluation_view(specs, batch):
    for spec in specs:
        batch = spec.evaluation_view(batch)
    return batch


# -- retention geometry --------------------------------------------------------


def retention_metric(obs, mask, crop_window):
    """Fraction of mask pixels inside ``crop_window = (dx, dy, size)``.

    A mask with no support retains everything (returns 1.0).
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 3:
        mask = mask.any(axis=-1)
    if obs is not None and np.asarray(obs).shape[:2] != mask.shape:
        raise ValidationError(f"mask shape {mask.shape} not aligned with observation {np.asarray(obs).shape[:2]}")
    total = int(mask.sum())
    if total == 0:
        return 1.0
    dx, dy, size = crop_window
    inside = int(mask[dy : dy + size, dx : dx + size].sum())
    return inside / total


def retention_table(mask, out):
    """Retention for every legal crop offset, indexed ``[dy, dx]``."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim == 3:
        mask = mask.any(axis=-1)
    total = int(mask.sum())
    n = mask.shape[0] - out + 1
    if total == 0:
        return np.ones((n, n))
    # summed-area table: window sums for every offset at once
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = mask.cumsum(0).cumsum(1)
    inside = sat[out:, out:][:n, :n] - sat[:n, out:][:, :n] - sat[out:, :n][:n] + sat[:n, :n]
    return inside / total


def expected_retention(mask, out):
    return float(retention_table(mask, out).mean())


def min_retention(mask, out):
    return float(retention_table(mask, out).min())
