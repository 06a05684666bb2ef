"""Dual-branch editing with attention-constrained latent optimization.

The source branch reconstructs the original from the shared inverted latent
``z_T`` and the target branch follows the edited prompt.  At every denoising
step inside the active windows the target latent is pushed by a combination of
two gradients: self-attention preservation (towards the source branch's SA
maps) and cross-attention alignment (towards attention of the new tokens
falling inside the edit mask).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .backend import (
    AlphaSchedule,
    CaptureConfig,
    ConstraintDescriptor,
    LatentGrid,
    tokenize_words,
)
from .constraints import FlattenedMask, mean_ratio, sa_preservation
from .errors import ConfigError, DivergenceError, SpecError, ValidationError
from .masks import BinaryMask, resample_mask
from .sampler import DDIMInversion, blend_latents, cfg_noise, ddim_sample_step
from .scheduler import (
    STRATEGIES,
    SchedulerParams,
    apply_noise_guidance,
    apply_update,
    combine,
)

log = logging.getLogger(__name__)

EDIT_TYPES = ("color", "texture", "object_replacement", "background", "style", "face")
GLOBAL_EDIT_TYPES = ("style",)

RATE_FACTORS = {
    "color": 0.05,
    "texture": 0.08,
    "background": 0.08,
    "object_replacement": 0.15,
    "style": 0.1,
    "face": 0.25,
}


@dataclass(frozen=True)
class EditSpec:
    source_prompt: str
    target_prompt: str
    target_tokens: list
    mask: Optional[BinaryMask] = None
    edit_type: str = "color"

    def __post_init__(self):
        object.__setattr__(self, "target_tokens", list(self.target_tokens))
        self.validate()

    def validate(self):
        if self.edit_type not in EDIT_TYPES:
            raise SpecError(f"unknown edit type {self.edit_type!r}")
        words = tokenize_words(self.target_prompt)
        for tok in self.target_tokens:
            sub = tokenize_words(tok)
            if not sub or _find_subsequence(words, sub) is None:
                raise SpecError(f"target token {tok!r} does not occur in target prompt {self.target_prompt!r}")
        if self.mask is None and self.edit_type not in GLOBAL_EDIT_TYPES:
            raise SpecError(f"edit type {self.edit_type!r} needs a mask")

    @property
    def is_global(self):
        return self.edit_type in GLOBAL_EDIT_TYPES

    def to_dict(self):
        return {
            "source_prompt": self.source_prompt,
            "target_prompt": self.target_prompt,
            "target_tokens": list(self.target_tokens),
            "edit_type": self.edit_type,
            "mask": None if self.mask is None else self.mask.values.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        mask = d.get("mask")
        if mask is not None:
            mask = BinaryMask(np.asarray(mask, dtype=np.float64))
        elif d.get("mask_path"):
            mask = BinaryMask.from_image(d["mask_path"])
        return cls(d["source_prompt"], d["target_prompt"], list(d.get("target_tokens", [])), mask,
                   d.get("edit_type", "color"))


@dataclass(frozen=True)
class EditConfig:
    scheduler: SchedulerParams = field(default_factory=SchedulerParams)
    tau1: int = 25
    tau2: int = 25
    max_it: int = 1
    cfg_scale: float = 7.5
    # None means every SA resolution the backend exposes
    sa_resolutions: Optional[frozenset] = None
    sap_mode: str = "global"
    sa_source: str = "source_branch"
    guidance_mode: str = "latent_optimization"
    strategy: str = "blc"
    ca_resolution: int = 16
    # constant weights for the naive/norm strategies; None -> (beta1, beta2)
    static_lambdas: Optional[tuple] = None

    def __post_init__(self):
        if self.sa_resolutions is not None:
            object.__setattr__(self, "sa_resolutions", frozenset(int(r) for r in self.sa_resolutions))
        if self.static_lambdas is not None:
            object.__setattr__(self, "static_lambdas", tuple(float(x) for x in self.static_lambdas))
        T = self.scheduler.T
        if not (1 <= self.tau1 <= T and 1 <= self.tau2 <= T):
            raise ConfigError(f"tau1={self.tau1}, tau2={self.tau2} must lie in [1, {T}]")
        if self.max_it < 1:
            raise ConfigError("max_it must be >= 1")
        if self.sap_mode not in ("global", "region"):
            raise ConfigError(f"unknown sap_mode {self.sap_mode!r}")
        if self.sa_source not in ("source_branch", "inversion_trajectory"):
            raise ConfigError(f"unknown sa_source {self.sa_source!r}")
        if self.guidance_mode not in ("latent_optimization", "noise_guidance"):
            raise ConfigError(f"unknown guidance_mode {self.guidance_mode!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    @property
    def T(self):
        return self.scheduler.T

    def uses_sap(self):
        return self.strategy != "caa_only"

    def uses_caa(self):
        return self.strategy != "sap_only"

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scheduler"] = self.scheduler.to_dict()
        d["sa_resolutions"] = None if self.sa_resolutions is None else sorted(self.sa_resolutions, reverse=True)
        d["static_lambdas"] = None if self.static_lambdas is None else list(self.static_lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown edit config keys: {sorted(unknown)}")
        if isinstance(d.get("scheduler"), dict):
            d["scheduler"] = SchedulerParams(**d["scheduler"])
        return cls(**d)


def preset_for_edit_type(edit_type: str) -> EditConfig:
    """Default hyperparameters per edit type."""
    if edit_type not in RATE_FACTORS:
        raise SpecError(f"unknown edit type {edit_type!r}")
    k = RATE_FACTORS[edit_type]
    return EditConfig(
        scheduler=SchedulerParams(beta1=5.0, beta2=5.0, k1=k, k2=k, T=50),
        tau1=5 if edit_type == "color" else 25,
        tau2=25,
        max_it=1,
        cfg_scale=7.5,
        sa_resolutions=frozenset({16, 8}) if edit_type == "object_replacement" else None,
        sap_mode="global",
        strategy="blc",
    )


@dataclass(frozen=True)
class TraceRow:
    t: int
    iter: int
    lambda1: float
    lambda2: float
    loss_sap: Optional[float]
    loss_caa: Optional[float]
    grad_sap_mean_abs: Optional[float]
    grad_caa_mean_abs: Optional[float]
    grad_sap_l2: Optional[float]
    grad_caa_l2: Optional[float]


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRow))


@dataclass
class GradientTrace:
    """Per (t, iteration) record of weights, losses and weighted gradient terms.

    Gradient columns describe the weighted terms actually summed into the
    update (e.g. ``lambda1 * g_sap / ||g_sap||`` for ``blc``); a column is
    ``None`` when its constraint was not evaluated.
    """

    rows: list = field(default_factory=list)

    def append(self, row: TraceRow):
        if self.rows and row.t > self.rows[-1].t:
            raise ValidationError("trace timesteps must not increase")
        if self.rows and row.t == self.rows[-1].t and row.iter != self.rows[-1].iter + 1:
            raise ValidationError("trace iterations must be consecutive")
        self.rows.append(row)

    def extend(self, rows):
        for r in rows:
            self.append(r)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def timesteps(self):
        return sorted({r.t for r in self.rows}, reverse=True)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]


@dataclass
class EditResult:
    final_latent: LatentGrid
    trace: GradientTrace
    config_echo: EditConfig
    source_latent: Optional[LatentGrid] = None
    initial_metrics: dict = field(default_factory=dict)
    final_metrics: dict = field(default_factory=dict)

    @property
    def per_step_losses(self):
        return [(r.t, r.iter, r.loss_sap, r.loss_caa) for r in self.trace]


@dataclass
class EditState:
    z_source: LatentGrid
    z_target: LatentGrid

    @property
    def t(self):
        return self.z_target.timestep


@dataclass
class StepOutput:
    state: EditState
    # target latent after the optimization update, before the DDIM step and blending
    z_hat: LatentGrid
    rows: list


def _find_subsequence(seq, sub):
    n = len(sub)
    for i in range(len(seq) - n + 1):
        if seq[i:i + n] == sub:
            return i
    return None


def resolve_tokens(tokens, prompt_tokens):
    """Map each target word to its CA column index (a list for multi-token words)."""
    groups = []
    for tok in tokens:
        sub = tokenize_words(tok)
        start = _find_subsequence(list(prompt_tokens), sub) if sub else None
        if start is None:
            raise SpecError(f"target token {tok!r} not found in prompt tokens {list(prompt_tokens)}")
        idx = list(range(start, start + len(sub)))
        groups.append(idx[0] if len(idx) == 1 else idx)
    return groups


class EditSession:
    """Resolved prompts, masks and references for one edit; owns no latent state."""

    def __init__(self, spec: EditSpec, config: EditConfig, backend, schedule: Optional[AlphaSchedule] = None,
                 reference: Optional[dict] = None):
        self.spec = spec
        self.config = config
        self.backend = backend
        self.schedule = schedule or AlphaSchedule.default(config.T)
        if self.schedule.T != config.T:
            raise ConfigError(f"schedule has T={self.schedule.T}, config has T={config.T}")
        _check_horizon(backend, config)
        self.src_prompt = backend.encode_prompt(spec.source_prompt)
        self.tgt_prompt = backend.encode_prompt(spec.target_prompt)
        self.uncond = backend.encode_prompt("")
        self.token_groups = resolve_tokens(spec.target_tokens, self.tgt_prompt.token_strings)
        hw = tuple(backend.latent_shape[1:])
        if spec.is_global or spec.mask is None:
            self.mask = BinaryMask.full(*hw)
            self.blend = False
        else:
            self.mask = resample_mask(spec.mask, hw)
            self.blend = True
        if config.sa_resolutions is None:
            self.sa_resolutions = frozenset(backend.sa_resolutions)
        else:
            missing = set(config.sa_resolutions) - set(backend.sa_resolutions)
            if missing:
                raise ConfigError(f"backend has no SA layers at {sorted(missing)}")
            self.sa_resolutions = frozenset(config.sa_resolutions)
        if config.uses_caa() and self.token_groups and config.ca_resolution not in backend.ca_resolutions:
            raise ConfigError(f"backend has no CA layers at resolution {config.ca_resolution}")
        if config.sa_source == "inversion_trajectory" and reference is None and config.uses_sap():
            raise ConfigError("sa_source=inversion_trajectory needs reference maps from the inversion pass")
        self.reference = reference

    # windows are inclusive: t = T, T-1, ..., tau
    def sap_active(self, t):
        return self.config.uses_sap() and t >= self.config.tau2

    def caa_active(self, t):
        return self.config.uses_caa() and bool(self.token_groups) and t >= self.config.tau1

    def _constraints(self, t, ref):
        cons = []
        if self.sap_active(t):
            kind = "region_sap" if self.config.sap_mode == "region" else "sap"
            cons.append(ConstraintDescriptor(kind, reference_sa=ref, mask=self.mask,
                                             sa_resolutions=self.sa_resolutions))
        if self.caa_active(t):
            cons.append(ConstraintDescriptor("caa", mask=self.mask, token_indices=self.token_groups,
                                             ca_resolution=self.config.ca_resolution))
        return cons

    def _source_pass(self, z_src, t, want_maps):
        cap = CaptureConfig(self.sa_resolutions if want_maps else frozenset())
        return self.backend.predict_noise(z_src, t, self.src_prompt, cap)

    def step(self, state: EditState) -> StepOutput:
        # overflow shows up as non-finite values and is reported as DivergenceError
        with np.errstate(over="ignore", invalid="ignore"):
            return self._step(state)

    def _step(self, state: EditState) -> StepOutput:
        cfg = self.config
        t = state.t
        if state.z_source.timestep != t:
            raise ValidationError("source and target latents are at different timesteps")
        if not 1 <= t <= cfg.T:
            raise ValidationError(f"step timestep {t} outside [1, {cfg.T}]")
        z_src, z_tgt = state.z_source, state.z_target
        sap_on, caa_on = self.sap_active(t), self.caa_active(t)
        want_maps = sap_on and cfg.sa_source == "source_branch"
        rows = []
        z_hat = z_tgt.values
        noise_shift = np.zeros_like(z_hat)
        eps_src_c = None
        if sap_on or caa_on:
            for it in range(1, cfg.max_it + 1):
                eps_src_c, src_bundle = self._source_pass(z_src, t, want_maps)
                if not sap_on:
                    ref = None
                elif cfg.sa_source == "source_branch":
                    ref = src_bundle.sa(self.sa_resolutions)
                else:
                    ref = [m for m in self.reference[t] if m.resolution in self.sa_resolutions]
                cons = self._constraints(t, ref)
                try:
                    results = self.backend.latent_gradients(z_hat, t, self.tgt_prompt, cons)
                except ValidationError as exc:
                    if not np.all(np.isfinite(z_hat)):
                        raise DivergenceError(t, it, str(exc)) from exc
                    raise
                zeros = np.zeros_like(z_hat)
                res = iter(results)
                loss_sap, g_sap = next(res) if sap_on else (None, zeros)
                loss_caa, g_caa = next(res) if caa_on else (None, zeros)
                try:
                    G = combine(cfg.strategy, g_sap, g_caa, t, cfg.scheduler, cfg.static_lambdas)
                except ArithmeticError as exc:
                    raise DivergenceError(t, it, "gradient is not finite") from exc
                if cfg.guidance_mode == "latent_optimization":
                    z_hat = apply_update(z_hat, G, self.mask)
                    if not np.all(np.isfinite(z_hat)):
                        raise DivergenceError(t, it, "after latent update")
                else:
                    noise_shift = noise_shift + self.mask.values[None] * G.values
                rows.append(TraceRow(
                    t=t, iter=it, lambda1=G.lambda1, lambda2=G.lambda2,
                    loss_sap=loss_sap, loss_caa=loss_caa,
                    grad_sap_mean_abs=float(np.mean(np.abs(G.sap_term))) if sap_on else None,
                    grad_caa_mean_abs=float(np.mean(np.abs(G.caa_term))) if caa_on else None,
                    grad_sap_l2=float(np.linalg.norm(G.sap_term)) if sap_on else None,
                    grad_caa_l2=float(np.linalg.norm(G.caa_term)) if caa_on else None,
                ))
        if eps_src_c is None:
            eps_src_c, _ = self._source_pass(z_src, t, False)
        a_t, a_prev = self.schedule[t], self.schedule[t - 1]
        eps_src_u, _ = self.backend.predict_noise(z_src, t, self.uncond)
        src_prev = ddim_sample_step(z_src.values, cfg_noise(eps_src_u, eps_src_c, cfg.cfg_scale), a_t, a_prev)

        eps_tgt_c, _ = self.backend.predict_noise(z_hat, t, self.tgt_prompt)
        eps_tgt_u, _ = self.backend.predict_noise(z_hat, t, self.uncond)
        eps_tgt = cfg_noise(eps_tgt_u, eps_tgt_c, cfg.cfg_scale)
        if cfg.guidance_mode == "noise_guidance" and rows:
            eps_tgt = apply_noise_guidance(eps_tgt, noise_shift)
        tgt_prev = ddim_sample_step(z_hat, eps_tgt, a_t, a_prev)
        if not np.all(np.isfinite(tgt_prev)):
            raise DivergenceError(t, len(rows), "after DDIM step")
        z_src_prev = LatentGrid(src_prev, t - 1)
        z_tgt_prev = LatentGrid(tgt_prev, t - 1)
        if self.blend:
            z_tgt_prev = blend_latents(z_tgt_prev, z_src_prev, self.mask)
        return StepOutput(EditState(z_src_prev, z_tgt_prev), LatentGrid(z_hat, t), rows)

    def measure(self, z_src: LatentGrid, z_tgt: LatentGrid) -> dict:
        """Global SA discrepancy and mean CA ratio between two latents at their timestep."""
        t = z_tgt.timestep
        cap = CaptureConfig(self.sa_resolutions, {self.config.ca_resolution}
                            if self.config.ca_resolution in self.backend.ca_resolutions else set())
        _, src = self.backend.predict_noise(z_src, t, self.src_prompt, cap)
        _, tgt = self.backend.predict_noise(z_tgt, t, self.tgt_prompt, cap)
        out = {"t": t, "loss_sap": sa_preservation(src.sa(self.sa_resolutions), tgt.sa(self.sa_resolutions))}
        ca = tgt.ca(self.config.ca_resolution)
        if self.token_groups and ca:
            flat = FlattenedMask.from_mask(self.mask, self.config.ca_resolution)
            out["mean_R"] = mean_ratio(ca, self.token_groups, flat)
        return out


def _check_horizon(backend, config):
    if backend.T < config.T:
        raise ConfigError(f"backend accepts t <= {backend.T}, config needs T={config.T}")


def capture_reference_maps(z0: LatentGrid, spec: EditSpec, config: EditConfig, backend,
                           inversion_provider=None, schedule: Optional[AlphaSchedule] = None):
    """Invert ``z0`` and, for ``sa_source=inversion_trajectory``, collect SA references.

    Returns ``(z_T, reference)`` where ``reference`` maps t (1..T) to the SA maps
    recorded along the inversion, or is ``None`` when the source branch is
    co-simulated during editing.
    """
    if z0.timestep != 0:
        raise ValidationError(f"reference capture starts from t=0, got t={z0.timestep}")
    _check_horizon(backend, config)
    schedule = schedule or AlphaSchedule.default(config.T)
    provider = inversion_provider or DDIMInversion()
    prompt = backend.encode_prompt(spec.source_prompt)
    capture = None
    if config.sa_source == "inversion_trajectory":
        res = backend.sa_resolutions if config.sa_resolutions is None else config.sa_resolutions
        capture = CaptureConfig(frozenset(res))
    traj = provider.invert(z0, prompt, schedule, backend, capture)
    reference = None
    if capture is not None:
        reference = {t: traj.bundle_at(t).sa_layers for t in range(1, traj.T + 1)}
    return traj.latents[-1], reference


def unifyedit_step(state: EditState, spec: EditSpec, config: EditConfig, backend,
                   schedule: Optional[AlphaSchedule] = None, reference: Optional[dict] = None) -> StepOutput:
    """One denoising step of both branches with the constrained target update."""
    return EditSession(spec, config, backend, schedule, reference).step(state)


def run_edit(z, spec: EditSpec, config: EditConfig, backend, inversion_provider=None,
             schedule: Optional[AlphaSchedule] = None) -> EditResult:
    """Full edit from a clean latent (t=0, inverted first) or a noise latent (t=T)."""
    schedule = schedule or AlphaSchedule.default(config.T)
    reference = None
    if z.timestep == 0:
        zT, reference = capture_reference_maps(z, spec, config, backend, inversion_provider, schedule)
    elif z.timestep == config.T:
        if config.sa_source == "inversion_trajectory":
            raise ConfigError("sa_source=inversion_trajectory needs the clean latent (t=0)")
        zT = z
    else:
        raise ValidationError(f"run_edit expects a latent at t=0 or t={config.T}, got t={z.timestep}")
    session = EditSession(spec, config, backend, schedule, reference)
    state = EditState(zT, zT)
    initial = session.measure(zT, zT)
    trace = GradientTrace()
    for t in range(config.T, 0, -1):
        out = session.step(state)
        trace.extend(out.rows)
        state = out.state
    final = session.measure(state.z_source, state.z_target)
    log.debug("edit finished: %s", final)
    return EditResult(state.z_target, trace, config, state.z_source, initial, final)
