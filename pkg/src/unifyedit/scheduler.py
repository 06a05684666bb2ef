"""Adaptive time-step weights and the gradient combination rules.

Two closed forms for the weights are available:

``eq14`` (default)
    lambda1 = beta1 * (1 - exp(-k1 (T - t))),  lambda2 = beta2 * exp(-k2 (T - t))

``alg1``
    lambda1 = beta1 * exp(-k1 t),  lambda2 = beta2 * (1 - exp(-k2 t))

They disagree on the exponent argument and on which weight gets the
``1 - exp`` form.  ``eq14`` is the one whose endpoints match the intended
behaviour (structure weight starts at 0 when denoising begins and grows,
alignment weight starts at beta2 and decays); ``alg1`` is kept for comparison.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .backend import LatentGrid
from .errors import ConfigError, RangeError, ShapeError
from .masks import BinaryMask, resample_mask

NORM_EPS = 1e-12
STRATEGIES = ("naive", "norm", "blc", "sap_only", "caa_only")


@dataclass(frozen=True)
class SchedulerParams:
    beta1: float = 5.0
    beta2: float = 5.0
    k1: float = 0.05
    k2: float = 0.05
    T: int = 50
    form: str = "eq14"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        # a zero scaling factor switches its constraint off (ablation runs)
        for name in ("beta1", "beta2"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("k1", "k2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.form not in ("eq14", "alg1"):
            raise ConfigError(f"unknown scheduler form {self.form!r}")

    def to_dict(self):
        return asdict(self)


def lambda_weights(t: int, p: SchedulerParams):
    if not 1 <= t <= p.T:
        raise RangeError(f"timestep {t} outside [1, {p.T}]")
    if p.form == "eq14":
        s = p.T - t
        return p.beta1 * (1.0 - math.exp(-p.k1 * s)), p.beta2 * math.exp(-p.k2 * s)
    return p.beta1 * math.exp(-p.k1 * t), p.beta2 * (1.0 - math.exp(-p.k2 * t))


@dataclass
class CombinedGradient:
    values: np.ndarray
    strategy: str
    lambda1: float
    lambda2: float
    # the two weighted terms that were summed into ``values``
    sap_term: Optional[np.ndarray] = None
    caa_term: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ArithmeticError("combined gradient is not finite")


def _pair(g_sap, g_caa):
    a = np.asarray(g_sap, dtype=np.float64)
    b = np.asarray(g_caa, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    return a, b


def unit(g) -> np.ndarray:
    """``g / ||g||_2``, or zeros when the norm is below 1e-12."""
    g = np.asarray(g, dtype=np.float64)
    n = float(np.linalg.norm(g))
    if n < NORM_EPS:
        return np.zeros_like(g)
    return g / n


def combine_naive(g_sap, g_caa, lambda1: float, lambda2: float) -> CombinedGradient:
    a, b = _pair(g_sap, g_caa)
    sa, cb = lambda1 * a, lambda2 * b
    return CombinedGradient(sa + cb, "naive", lambda1, lambda2, sa, cb)


def combine_normalized(g_sap, g_caa, lambda1: float, lambda2: float, strategy: str = "norm") -> CombinedGradient:
    a, b = _pair(g_sap, g_caa)
    sa, cb = lambda1 * unit(a), lambda2 * unit(b)
    return CombinedGradient(sa + cb, strategy, lambda1, lambda2, sa, cb)


def combine_balanced(g_sap, g_caa, t: int, p: SchedulerParams) -> CombinedGradient:
    l1, l2 = lambda_weights(t, p)
    return combine_normalized(g_sap, g_caa, l1, l2, strategy="blc")


def combine(strategy: str, g_sap, g_caa, t: int, p: SchedulerParams, static=None) -> CombinedGradient:
    """Dispatch on ``strategy``.

    ``naive`` and ``norm`` use constant weights ``static`` (default
    ``(beta1, beta2)``); the scheduled strategies use ``lambda_weights(t)``.
    ``sap_only``/``caa_only`` drop the other term entirely.
    """
    if strategy in ("naive", "norm"):
        l1, l2 = static if static is not None else (p.beta1, p.beta2)
        fn = combine_naive if strategy == "naive" else combine_normalized
        return fn(g_sap, g_caa, l1, l2)
    if strategy == "blc":
        return combine_balanced(g_sap, g_caa, t, p)
    l1, l2 = lambda_weights(t, p)
    a, b = _pair(g_sap, g_caa)
    if strategy == "sap_only":
        term = l1 * unit(a)
        return CombinedGradient(term, strategy, l1, l2, term, np.zeros_like(b))
    if strategy == "caa_only":
        term = l2 * unit(b)
        return CombinedGradient(term, strategy, l1, l2, np.zeros_like(a), term)
    raise ConfigError(f"unknown strategy {strategy!r}")


def _spatial_mask(mask: Optional[BinaryMask], shape):
    if mask is None:
        return np.ones(shape[1:])
    m = resample_mask(mask, shape[1:]).values
    if m.shape != tuple(shape[1:]):
        raise ShapeError(f"mask {m.shape} does not fit latent grid {shape[1:]}")
    return m


def apply_update(z, g, mask: Optional[BinaryMask] = None):
    """``z - M * g`` with the spatial mask broadcast over channels.

    Cells outside the mask are returned bit-for-bit unchanged.
    """
    values = z.values if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float64)
    gv = g.values if isinstance(g, CombinedGradient) else np.asarray(g, dtype=np.float64)
    if values.ndim == 0:
        m = 1.0 if mask is None else float(np.asarray(mask.values).reshape(-1)[0])
        out = values - m * gv
    else:
        if gv.shape != values.shape:
            raise ShapeError(f"gradient shape {gv.shape} != latent shape {values.shape}")
        m = _spatial_mask(mask, values.shape)
        out = np.where(m[None] > 0, values - gv, values)
    return z.at(out) if isinstance(z, LatentGrid) else out


def apply_noise_guidance(eps, g):
    e = np.asarray(eps, dtype=np.float64)
    gv = g.values if isinstance(g, CombinedGradient) else np.asarray(g, dtype=np.float64)
    if e.shape != gv.shape:
        raise ShapeError(f"gradient shape {gv.shape} != noise shape {e.shape}")
    return e - gv
