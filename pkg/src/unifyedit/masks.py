from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class BinaryMask:
    """Spatial edit region with entries exactly 0 or 1."""

    values: np.ndarray
    allow_empty: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValidationError("mask entries must be exactly 0 or 1")
        if not self.allow_empty and not v.any():
            raise ValidationError("mask is empty; pass allow_empty=True to permit it")
        object.__setattr__(self, "values", v.astype(np.float64))

    @classmethod
    def full(cls, height, width=None):
        return cls(np.ones((height, width or height)))

    @classmethod
    def empty(cls, height, width=None):
        return cls(np.zeros((height, width or height)), allow_empty=True)

    @classmethod
    def from_image(cls, path, threshold=128, allow_empty=False):
        """Load an 8-bit grayscale mask image; pixels >= threshold are inside."""
        img = np.asarray(Image.open(path).convert("L"))
        return cls((img >= threshold).astype(np.float64), allow_empty=allow_empty)

    def to_image(self, path):
        Image.fromarray((self.values * 255).astype(np.uint8), mode="L").save(path)

    @property
    def shape(self):
        return self.values.shape

    @property
    def is_full(self):
        return bool(self.values.all())

    @property
    def is_empty(self):
        return not self.values.any()

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)


def _area_average(values: np.ndarray, size) -> np.ndarray:
    h, w = values.shape
    th, tw = size
    if h % th == 0 and w % tw == 0:
        return values.reshape(th, h // th, tw, w // tw).mean(axis=(1, 3))
    if th % h == 0 and tw % w == 0:
        return np.repeat(np.repeat(values, th // h, axis=0), tw // w, axis=1)
    img = Image.fromarray(values.astype(np.float32), mode="F")
    return np.asarray(img.resize((tw, th), resample=Image.BOX), dtype=np.float64)


def resample_mask(mask: BinaryMask, size) -> BinaryMask:
    """Area-average ``mask`` onto a ``size`` grid, then threshold at 0.5."""
    if isinstance(size, int):
        size = (size, size)
    size = tuple(int(s) for s in size)
    if mask.shape == size:
        return mask
    avg = _area_average(mask.values, size)
    return BinaryMask((avg >= 0.5).astype(np.float64), allow_empty=True)
