"""Deterministic DDIM inversion/sampling, classifier-free guidance and mask blending."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .backend import AlphaSchedule, CaptureConfig, LatentGrid, NO_CAPTURE, PromptEncoding
from .errors import DomainError, ShapeError, ValidationError
from .masks import BinaryMask, resample_mask

INVERSION = "inversion"
SAMPLING = "sampling"


def cfg_noise(eps_uncond, eps_cond, scale: float):
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"cfg shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def _check_alpha(*alphas):
    for a in alphas:
        if not (0.0 < a <= 1.0):
            raise DomainError(f"alpha must lie in (0, 1], got {a}")


def _ddim_move(z, eps, alpha_from, alpha_to):
    # shared form of both directions: move a latent from alpha_from to alpha_to
    _check_alpha(alpha_from, alpha_to)
    values = z.values if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != values.shape:
        raise ShapeError(f"eps shape {eps.shape} != latent shape {values.shape}")
    if alpha_from == alpha_to:
        return values.copy()
    coef_z = math.sqrt(alpha_to / alpha_from)
    coef_eps = math.sqrt(alpha_to) * (math.sqrt(1.0 / alpha_to - 1.0) - math.sqrt(1.0 / alpha_from - 1.0))
    return coef_z * values + coef_eps * eps


def ddim_invert_step(z, eps, alpha_t: float, alpha_next: float):
    """One inversion step t -> t+1.  LatentGrid in gives LatentGrid out (t+1)."""
    out = _ddim_move(z, eps, alpha_t, alpha_next)
    return LatentGrid(out, z.timestep + 1) if isinstance(z, LatentGrid) else out


def ddim_sample_step(z, eps, alpha_t: float, alpha_prev: float):
    """One deterministic (eta = 0) sampling step t -> t-1."""
    out = _ddim_move(z, eps, alpha_t, alpha_prev)
    return LatentGrid(out, z.timestep - 1) if isinstance(z, LatentGrid) else out


@dataclass
class Trajectory:
    """Latents indexed by timestep (``latents[t]`` is tagged ``t``).

    ``bundles[k]`` holds the attention of the pass at ``(latents[k + 1], k + 1)``,
    i.e. one bundle per denoising timestep T..1.  ``noise_preds[k]`` is the noise
    used on the transition between t=k and t=k+1.
    """

    latents: list
    direction: str
    bundles: Optional[list] = None
    noise_preds: Optional[list] = None

    def __post_init__(self):
        tags = [z.timestep for z in self.latents]
        if tags != list(range(len(tags))):
            raise ValidationError(f"trajectory timestep tags must be 0..T in order, got {tags}")

    @property
    def T(self):
        return len(self.latents) - 1

    def bundle_at(self, t: int):
        if self.bundles is None:
            raise ValidationError("trajectory has no captured attention")
        return self.bundles[t - 1]

    def stacked(self) -> np.ndarray:
        return np.stack([z.values for z in self.latents])


def invert_trajectory(z0: LatentGrid, prompt: PromptEncoding, schedule: AlphaSchedule, backend,
                      capture: Optional[CaptureConfig] = None) -> Trajectory:
    """Plain DDIM inversion with the conditional prediction (guidance scale 1)."""
    if z0.timestep != 0:
        raise ValidationError(f"inversion starts from t=0, got t={z0.timestep}")
    T = schedule.T
    latents = [z0]
    noises = []
    bundles = [] if capture is not None else None
    cap = capture or NO_CAPTURE
    z = z0
    for t in range(T):
        eps, bundle = backend.predict_noise(z, t, prompt, cap if t > 0 else NO_CAPTURE)
        if bundles is not None and t > 0:
            bundles.append(bundle)
        noises.append(eps)
        z = ddim_invert_step(z, eps, schedule[t], schedule[t + 1])
        latents.append(z)
    if bundles is not None:
        bundles.append(backend.predict_noise(z, T, prompt, cap)[1])
    return Trajectory(latents, INVERSION, bundles, noises)


def sample_trajectory(zT: LatentGrid, prompt: PromptEncoding, schedule: AlphaSchedule, backend,
                      cfg_scale: float = 7.5, uncond: Optional[PromptEncoding] = None,
                      replay: Optional[list] = None) -> Trajectory:
    """DDIM sampling from ``zT`` down to t=0.

    With ``replay`` (the ``noise_preds`` of an inversion) the recorded noise is
    reused instead of querying the backend, which makes sampling the exact
    algebraic inverse of that inversion.
    """
    T = schedule.T
    if zT.timestep != T:
        raise ValidationError(f"sampling starts from t={T}, got t={zT.timestep}")
    if uncond is None and replay is None and cfg_scale != 1.0:
        uncond = backend.encode_prompt("")
    z = zT
    out = {T: zT}
    noises = [None] * T
    for t in range(T, 0, -1):
        if replay is not None:
            eps = replay[t - 1]
        else:
            eps_c, _ = backend.predict_noise(z, t, prompt)
            if cfg_scale == 1.0:
                eps = eps_c
            else:
                eps_u, _ = backend.predict_noise(z, t, uncond)
                eps = cfg_noise(eps_u, eps_c, cfg_scale)
        noises[t - 1] = eps
        z = ddim_sample_step(z, eps, schedule[t], schedule[t - 1])
        out[t - 1] = z
    return Trajectory([out[t] for t in range(T + 1)], SAMPLING, None, noises)


def blend_latents(z_target: LatentGrid, z_source: LatentGrid, mask: BinaryMask) -> LatentGrid:
    """``M * target + (1 - M) * source`` with the mask resampled to the latent grid."""
    if z_target.shape != z_source.shape:
        raise ShapeError(f"blend shapes differ: {z_target.shape} vs {z_source.shape}")
    m = resample_mask(mask, z_target.shape[1:]).values
    if m.shape != z_target.shape[1:]:
        raise ShapeError(f"mask {m.shape} does not match latent grid {z_target.shape[1:]}")
    return z_target.at(m * z_target.values + (1.0 - m) * z_source.values)


class InversionProvider(Protocol):
    """Anything that maps a clean latent to an inversion trajectory."""

    def invert(self, z0: LatentGrid, prompt: PromptEncoding, schedule: AlphaSchedule, backend,
               capture: Optional[CaptureConfig] = None) -> Trajectory: ...


class DDIMInversion:
    name = "ddim"

    def invert(self, z0, prompt, schedule, backend, capture=None):
        return invert_trajectory(z0, prompt, schedule, backend, capture)
