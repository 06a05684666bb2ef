"""Attention-map losses: self-attention preservation and cross-attention alignment.

Every loss is evaluated in float64 with torch so that it can sit inside an
autograd graph.  When none of the inputs is a tensor the result comes back as a
plain ``float``; otherwise a 0-dim tensor is returned.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import DegenerateMaskError, ShapeError, ValidationError
from .masks import BinaryMask, resample_mask

R_FLOOR = 1e-12


@dataclass(frozen=True)
class FlattenedMask:
    vector: np.ndarray
    resolution: int

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size != self.resolution ** 2:
            raise ShapeError(f"flattened mask has {v.size} cells, expected {self.resolution}^2")
        if not np.all((v == 0) | (v == 1)):
            raise ValidationError("flattened mask must be binary")
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_mask(cls, mask: BinaryMask, resolution: int) -> "FlattenedMask":
        return cls(resample_mask(mask, resolution).flatten(), resolution)


@dataclass(frozen=True)
class SAMaskOuter:
    matrix: np.ndarray

    @property
    def resolution(self):
        return int(round(np.sqrt(self.matrix.shape[0])))


def mask_outer(m) -> SAMaskOuter:
    """Outer product ``m m^T`` of a flattened binary mask."""
    vec = m.vector if isinstance(m, FlattenedMask) else np.asarray(m, dtype=np.float64).reshape(-1)
    if not np.all((vec == 0) | (vec == 1)):
        raise ValidationError("mask_outer expects a binary vector")
    return SAMaskOuter(np.outer(vec, vec))


def _t(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _finish(value: torch.Tensor, *inputs):
    if any(isinstance(i, torch.Tensor) for i in inputs):
        return value
    return float(value)


def _map_of(entry):
    # accepts AttentionMap-like objects or bare arrays
    return getattr(entry, "map", entry)


def _key_of(entry, position):
    if hasattr(entry, "layer_id"):
        return (entry.layer_id, entry.resolution)
    return position


def _pair_maps(src, tgt):
    if len(src) != len(tgt):
        raise ValidationError(f"layer count mismatch: {len(src)} source vs {len(tgt)} target maps")
    by_key = {_key_of(e, i): e for i, e in enumerate(tgt)}
    pairs = []
    for i, s in enumerate(src):
        key = _key_of(s, i)
        if key not in by_key:
            raise ValidationError(f"no target map for layer {key}")
        a, b = _map_of(s), _map_of(by_key[key])
        if tuple(a.shape) != tuple(b.shape):
            raise ValidationError(f"layer {key}: shape {tuple(a.shape)} vs {tuple(b.shape)}")
        pairs.append((a, b))
    return pairs


def sa_preservation(src: Sequence, tgt: Sequence):
    """Sum over layers and entries of the squared SA-map difference."""
    pairs = _pair_maps(src, tgt)
    total = torch.zeros((), dtype=torch.float64)
    for a, b in pairs:
        total = total + ((_t(a) - _t(b)) ** 2).sum()
    return _finish(total, *[m for p in pairs for m in p])


def region_sa_preservation(src: Sequence, tgt: Sequence, m_hat):
    """Mask-restricted SA preservation.

    ``m_hat`` is either one :class:`SAMaskOuter` (used for every map of the
    matching size) or a mapping ``resolution -> SAMaskOuter``.
    """
    pairs = _pair_maps(src, tgt)
    total = torch.zeros((), dtype=torch.float64)
    for a, b in pairs:
        n = a.shape[0]
        if isinstance(m_hat, dict):
            res = int(round(np.sqrt(n)))
            if res not in m_hat:
                raise ShapeError(f"no SA mask for resolution {res}")
            mh = m_hat[res]
        else:
            mh = m_hat
        mat = mh.matrix if isinstance(mh, SAMaskOuter) else np.asarray(mh)
        if mat.shape != (n, n):
            raise ShapeError(f"SA mask shape {mat.shape} does not match map shape {(n, n)}")
        mt = _t(mat)
        total = total + ((mt * _t(a) - mt * _t(b)) ** 2).sum()
    return _finish(total, *[m for p in pairs for m in p])


def _token_column(ca, token):
    if isinstance(token, (list, tuple, np.ndarray)):
        idx = [int(i) for i in token]
        if not idx:
            raise ValidationError("empty token index group")
        for i in idx:
            if not 0 <= i < ca.shape[1]:
                raise ValidationError(f"token index {i} outside [0, {ca.shape[1]})")
        return ca[:, idx].mean(dim=1)
    token = int(token)
    if not 0 <= token < ca.shape[1]:
        raise ValidationError(f"token index {token} outside [0, {ca.shape[1]})")
    return ca[:, token]


def ca_ratio(ca_map, token, mask):
    """Mean attention of ``token`` inside the mask over its mean outside.

    With a mask covering every cell the outside mean is undefined and the ratio
    falls back to the inside mean.  ``token`` may be a list of column indices,
    in which case their mean column is used.
    """
    ca = _t(_map_of(ca_map))
    vec = mask.vector if isinstance(mask, FlattenedMask) else np.asarray(mask, dtype=np.float64).reshape(-1)
    if vec.size != ca.shape[0]:
        raise ShapeError(f"mask has {vec.size} cells, CA map has {ca.shape[0]} rows")
    n_in = float(vec.sum())
    if n_in == 0:
        raise DegenerateMaskError("mask has no inside cells")
    col = _token_column(ca, token)
    m = torch.as_tensor(vec)
    # means are taken around a detached shift so equal entries give exactly equal means
    shift = col.detach()[0]
    dev = col - shift
    inside = shift + (dev * m).sum() / n_in
    n_out = vec.size - n_in
    if n_out == 0:
        r = inside
    else:
        r = inside / (shift + (dev * (1.0 - m)).sum() / n_out)
    return _finish(r, _map_of(ca_map))


def ca_alignment(ca_layers: Sequence, tokens: Sequence, mask):
    """Mean over tokens of ``-(sum_l sqrt(R_l))**2``."""
    if len(ca_layers) < 1:
        raise ValidationError("ca_alignment needs at least one CA layer")
    if len(tokens) < 1:
        raise ValidationError("ca_alignment needs at least one target token")
    per_token = []
    for tok in tokens:
        s = torch.zeros((), dtype=torch.float64)
        for layer in ca_layers:
            r = ca_ratio(_t(_map_of(layer)), tok, mask)
            s = s + torch.sqrt(torch.clamp(r, min=R_FLOOR))
        per_token.append(-(s ** 2))
    loss = torch.stack(per_token).mean()
    return _finish(loss, *[_map_of(layer) for layer in ca_layers])


def mean_ratio(ca_layers: Sequence, tokens: Sequence, mask) -> float:
    """Average of R over layers and tokens (diagnostic, no autograd)."""
    with torch.no_grad():
        vals = [float(ca_ratio(_t(_map_of(layer)), tok, mask)) for tok in tokens for layer in ca_layers]
    return float(np.mean(vals))
