"""Denoising backends that expose attention maps differentiably w.r.t. the latent.

``ToyBackend`` is a small, seeded, fully differentiable stand-in for a latent
diffusion U-Net.  For every attention resolution the latent is average-pooled,
lifted to a hidden feature with a timestep embedding, and fed through ``L``
attention blocks (self-attention over spatial cells, cross-attention against the
prompt embeddings).  The noise prediction is a linear readout of the attention
outputs, upsampled back to the latent grid.

A real-model adapter has to provide the same surface as :class:`DiffusionBackend`:
``encode_prompt``, ``predict_noise`` and ``latent_gradients`` (through autograd),
plus its own image/latent codecs.
"""
from __future__ import annotations

import abc
import math
import re
import zlib
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch

from .constraints import (
    FlattenedMask,
    ca_alignment,
    mask_outer,
    region_sa_preservation,
    sa_preservation,
)
from .errors import ConfigError, RangeError, ShapeError, ValidationError
from .masks import BinaryMask

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"
BOS_TOKEN = "<bos>"


@dataclass(frozen=True)
class LatentGrid:
    values: np.ndarray
    timestep: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"latent must be (channels, height, width), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"latent at t={self.timestep} has non-finite entries")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestep", int(self.timestep))

    @property
    def shape(self):
        return self.values.shape

    def at(self, values, timestep=None) -> "LatentGrid":
        return LatentGrid(values, self.timestep if timestep is None else timestep)


@dataclass(frozen=True)
class PromptEncoding:
    token_embeddings: np.ndarray
    token_strings: list
    text: str = ""

    def __post_init__(self):
        emb = np.asarray(self.token_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValidationError("prompt encoding needs at least one token embedding row")
        if emb.shape[0] != len(self.token_strings):
            raise ValidationError("embedding rows and token strings disagree")
        object.__setattr__(self, "token_embeddings", emb)

    @property
    def token_count(self):
        return len(self.token_strings)


@dataclass(frozen=True)
class AttentionMap:
    layer_id: int
    resolution: int
    map: np.ndarray


@dataclass(frozen=True)
class AttentionBundle:
    sa_layers: list
    ca_layers: list
    source_pass: str = CONDITIONAL

    def sa(self, resolutions=None):
        return [m for m in self.sa_layers if resolutions is None or m.resolution in resolutions]

    def ca(self, resolution=None):
        return [m for m in self.ca_layers if resolution is None or m.resolution == resolution]

    def validate(self, L=None, atol=1e-5):
        for kind, layers in (("SA", self.sa_layers), ("CA", self.ca_layers)):
            for m in layers:
                a = m.map
                if a.min() < 0 or a.max() > 1:
                    raise ValidationError(f"{kind} layer {m.layer_id}: entries outside [0, 1]")
                if not np.allclose(a.sum(axis=1), 1.0, atol=atol, rtol=0):
                    raise ValidationError(f"{kind} layer {m.layer_id}: rows do not sum to 1")
        ids16 = [m.layer_id for m in self.ca_layers if m.resolution == 16]
        if len(set(ids16)) != len(ids16):
            raise ValidationError("duplicate layer ids among 16x16 CA layers")
        if L is not None and 16 in {m.resolution for m in self.ca_layers} and len(ids16) != L:
            raise ValidationError(f"expected {L} CA layers at resolution 16, found {len(ids16)}")


@dataclass(frozen=True)
class AlphaSchedule:
    """Cumulative signal coefficients indexed by t = 0..T."""

    alphas: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if a.size < 2:
            raise ConfigError("alpha schedule needs at least two entries")
        if not (0.99 < a[0] <= 1.0):
            raise ConfigError(f"alphas[0] must lie in (0.99, 1], got {a[0]}")
        if np.any(a <= 0) or np.any(a > 1):
            raise ConfigError("alphas must lie in (0, 1]")
        if np.any(np.diff(a) >= 0):
            raise ConfigError("alphas must be strictly decreasing in t")
        object.__setattr__(self, "alphas", a)

    @property
    def T(self):
        return self.alphas.size - 1

    def __getitem__(self, t):
        return float(self.alphas[t])

    @classmethod
    def default(cls, T=50, train_steps=1000, beta_start=0.00085, beta_end=0.012):
        """Scaled-linear betas (latent-diffusion convention), DDIM-subsampled.

        Index t >= 1 maps to training step ``(t - 1) * stride + 1``; index 0 is the
        clean end with alpha = 1.
        """
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps) ** 2
        cum = np.cumprod(1.0 - betas)
        stride = train_steps // T
        steps = (np.arange(1, T + 1) - 1) * stride + 1
        return cls(np.concatenate([[1.0], cum[steps]]))

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            vals = [float(line) for line in fh if line.strip()]
        return cls(np.array(vals))

    def to_file(self, path):
        with open(path, "w") as fh:
            for a in self.alphas:
                fh.write(f"{float(a)!r}\n")


@dataclass(frozen=True)
class CaptureConfig:
    sa_resolutions: frozenset = frozenset()
    ca_resolutions: frozenset = frozenset()
    capture_pass: str = CONDITIONAL

    def __post_init__(self):
        object.__setattr__(self, "sa_resolutions", frozenset(int(r) for r in self.sa_resolutions))
        object.__setattr__(self, "ca_resolutions", frozenset(int(r) for r in self.ca_resolutions))
        if self.capture_pass not in (CONDITIONAL, UNCONDITIONAL):
            raise ConfigError(f"unknown capture pass {self.capture_pass!r}")


NO_CAPTURE = CaptureConfig()


@dataclass(frozen=True)
class ConstraintDescriptor:
    """Parameterizes one constraint loss for a gradient query.

    ``token_indices`` entries are ints or lists of ints (multi-subtoken words,
    whose CA columns are averaged).
    """

    kind: str
    reference_sa: Optional[list] = None
    mask: Optional[BinaryMask] = None
    token_indices: Optional[list] = None
    sa_resolutions: Optional[frozenset] = None
    ca_resolution: int = 16

    def validate(self):
        if self.kind in ("sap", "region_sap"):
            if self.reference_sa is None:
                raise ValidationError(f"{self.kind} constraint needs reference_sa")
            if self.kind == "region_sap" and self.mask is None:
                raise ValidationError("region_sap constraint needs a mask")
        elif self.kind == "caa":
            if not self.token_indices:
                raise ValidationError("caa constraint needs token_indices")
            if self.mask is None:
                raise ValidationError("caa constraint needs a mask")
        else:
            raise ValidationError(f"unknown constraint kind {self.kind!r}")

    def sa_filter(self, available):
        return set(available) if self.sa_resolutions is None else set(self.sa_resolutions)


def compute_attention(Q, K, V, d):
    """``softmax(Q K^T / sqrt(d)) V``; returns ``(output, map)``.

    Numpy in, numpy out; tensors in, tensors out (autograd preserved).
    """
    as_numpy = not isinstance(Q, torch.Tensor)
    q, k, v = (torch.as_tensor(np.asarray(x, dtype=np.float64)) if as_numpy else x for x in (Q, K, V))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("Q, K, V must be 2-D")
    if q.shape[1] != d or k.shape[1] != d:
        raise ShapeError(f"d={d} does not match Q/K widths {q.shape[1]}, {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    attn = torch.softmax(q @ k.T / math.sqrt(d), dim=-1)
    out = attn @ v
    if as_numpy:
        return out.numpy(), attn.numpy()
    return out, attn


def evaluate_constraint(desc: ConstraintDescriptor, sa_layers, ca_layers, latent_hw):
    """Loss of ``desc`` on one pass's (tensor) attention maps."""
    if desc.kind in ("sap", "region_sap"):
        keep = desc.sa_filter({m.resolution for m in sa_layers})
        tgt = [m for m in sa_layers if m.resolution in keep]
        src = [m for m in desc.reference_sa if m.resolution in keep]
        if desc.kind == "sap":
            return sa_preservation(src, tgt)
        m_hat = {r: mask_outer(FlattenedMask.from_mask(desc.mask, r)) for r in {m.resolution for m in tgt}}
        return region_sa_preservation(src, tgt, m_hat)
    layers = [m for m in ca_layers if m.resolution == desc.ca_resolution]
    if not layers:
        raise ValidationError(f"backend produced no CA layers at resolution {desc.ca_resolution}")
    flat = FlattenedMask.from_mask(desc.mask, desc.ca_resolution)
    return ca_alignment(layers, list(desc.token_indices), flat)


class DiffusionBackend(abc.ABC):
    """Noise predictor with differentiable attention capture."""

    T: int
    latent_shape: tuple
    sa_resolutions: tuple
    ca_resolutions: tuple
    L: int

    @abc.abstractmethod
    def encode_prompt(self, text: str) -> PromptEncoding: ...

    @abc.abstractmethod
    def _forward(self, z: torch.Tensor, t: int, prompt: PromptEncoding, capture: CaptureConfig):
        """Return ``(eps, sa_layers, ca_layers)`` with tensor-valued AttentionMaps."""

    def tokenize(self, text: str) -> list:
        return [BOS_TOKEN] + tokenize_words(text)

    def _check_inputs(self, z, t, capture):
        if not 0 <= int(t) <= self.T:
            raise RangeError(f"timestep {t} outside [0, {self.T}]")
        values = z.values if isinstance(z, LatentGrid) else np.asarray(z, dtype=np.float64)
        if values.shape != tuple(self.latent_shape):
            raise ShapeError(f"latent shape {values.shape} != backend shape {tuple(self.latent_shape)}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("latent has non-finite entries")
        if capture is not None:
            bad_sa = set(capture.sa_resolutions) - set(self.sa_resolutions)
            bad_ca = set(capture.ca_resolutions) - set(self.ca_resolutions)
            if bad_sa or bad_ca:
                raise ConfigError(f"backend cannot capture resolutions SA={sorted(bad_sa)} CA={sorted(bad_ca)}")
        return values

    def predict_noise(self, z, t: int, prompt: PromptEncoding, capture: CaptureConfig = NO_CAPTURE):
        """Noise prediction plus the attention maps requested by ``capture``.

        ``capture.capture_pass`` only labels the bundle: the pass is whichever
        prompt is supplied (the unconditional pass uses the empty prompt).
        """
        values = self._check_inputs(z, t, capture)
        with torch.no_grad():
            eps, sa, ca = self._forward(torch.as_tensor(values), int(t), prompt, capture)
        bundle = AttentionBundle(
            sa_layers=[AttentionMap(m.layer_id, m.resolution, m.map.numpy()) for m in sa],
            ca_layers=[AttentionMap(m.layer_id, m.resolution, m.map.numpy()) for m in ca],
            source_pass=capture.capture_pass,
        )
        return eps.numpy(), bundle

    def latent_gradients(self, z, t: int, prompt: PromptEncoding, constraints: Sequence[ConstraintDescriptor]):
        """One forward pass, then ``(loss, dloss/dz)`` for each constraint."""
        for c in constraints:
            c.validate()
        values = self._check_inputs(z, t, None)
        sa_res, ca_res = set(), set()
        for c in constraints:
            if c.kind == "caa":
                ca_res.add(c.ca_resolution)
            else:
                sa_res |= c.sa_filter(self.sa_resolutions)
        capture = CaptureConfig(frozenset(sa_res & set(self.sa_resolutions)), frozenset(ca_res))
        if ca_res - set(self.ca_resolutions):
            raise ConfigError(f"backend has no CA layers at {sorted(ca_res - set(self.ca_resolutions))}")
        zt = torch.tensor(values, requires_grad=True)
        with torch.enable_grad():
            _, sa, ca = self._forward(zt, int(t), prompt, capture)
            out = []
            for i, c in enumerate(constraints):
                loss = evaluate_constraint(c, sa, ca, values.shape[1:])
                if loss.requires_grad:
                    (g,) = torch.autograd.grad(loss, zt, retain_graph=i + 1 < len(constraints), allow_unused=True)
                    g = torch.zeros_like(zt) if g is None else g
                else:
                    g = torch.zeros_like(zt)
                out.append((float(loss.detach()), g.detach().numpy().copy()))
        return out

    def latent_gradient(self, z, t: int, prompt: PromptEncoding, constraint: ConstraintDescriptor) -> np.ndarray:
        return self.latent_gradients(z, t, prompt, [constraint])[0][1]

    def constraint_loss(self, z, t: int, prompt: PromptEncoding, constraint: ConstraintDescriptor) -> float:
        """Forward-only loss value (used by finite-difference checks)."""
        constraint.validate()
        values = self._check_inputs(z, t, None)
        sa_res = constraint.sa_filter(self.sa_resolutions) if constraint.kind != "caa" else set()
        ca_res = {constraint.ca_resolution} if constraint.kind == "caa" else set()
        capture = CaptureConfig(frozenset(sa_res & set(self.sa_resolutions)), frozenset(ca_res))
        with torch.no_grad():
            _, sa, ca = self._forward(torch.as_tensor(values), int(t), prompt, capture)
            return float(evaluate_constraint(constraint, sa, ca, values.shape[1:]))


_WORD = re.compile(r"[a-z0-9']+")


def tokenize_words(text: str) -> list:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class ToyBackendConfig:
    channels: int = 4
    spatial: int = 16
    sa_resolutions: tuple = (16, 8, 4)
    ca_resolutions: tuple = (16, 8)
    L: int = 5
    embed_dim: int = 16
    hidden_dim: int = 16
    head_dim: int = 8
    T: int = 50
    # weight of the attention readout relative to the denoising skip term
    attn_gain: float = 0.3
    # multiplies the whole noise prediction; 0 gives eps == 0 with live attention
    eps_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sa_resolutions", tuple(sorted({int(r) for r in self.sa_resolutions}, reverse=True)))
        object.__setattr__(self, "ca_resolutions", tuple(sorted({int(r) for r in self.ca_resolutions}, reverse=True)))
        for r in set(self.sa_resolutions) | set(self.ca_resolutions):
            if r < 1 or self.spatial % r:
                raise ConfigError(f"spatial size {self.spatial} is not divisible by resolution {r}")
        for name in ("channels", "spatial", "L", "embed_dim", "hidden_dim", "head_dim", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ToyBackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"seed"}
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple) else getattr(self, f.name))
                for f in fields(self)}


@dataclass
class _Block:
    layer_id: int
    resolution: int
    w_in: torch.Tensor
    pos: torch.Tensor
    w_time: torch.Tensor
    sa: Optional[dict] = None
    ca: Optional[dict] = None


class ToyBackend(DiffusionBackend):
    """Seeded toy noise predictor; immutable after construction."""

    def __init__(self, seed: int, config: ToyBackendConfig):
        self.seed = int(seed)
        self.config = config
        self.T = config.T
        self.L = config.L
        self.latent_shape = (config.channels, config.spatial, config.spatial)
        self.sa_resolutions = config.sa_resolutions
        self.ca_resolutions = config.ca_resolutions
        self._blocks = self._init_blocks()

    def _init_blocks(self):
        cfg = self.config
        rng = np.random.default_rng(self.seed)

        def w(*shape, gain=1.0):
            return torch.as_tensor(rng.standard_normal(shape) * gain / math.sqrt(shape[0]))

        blocks = []
        layer_id = 0
        for r in sorted(set(cfg.sa_resolutions) | set(cfg.ca_resolutions), reverse=True):
            for _ in range(cfg.L):
                b = _Block(
                    layer_id=layer_id,
                    resolution=r,
                    w_in=w(cfg.channels, cfg.hidden_dim, gain=2.0),
                    pos=torch.as_tensor(rng.standard_normal((r * r, cfg.hidden_dim)) * 0.5),
                    w_time=w(cfg.hidden_dim, cfg.hidden_dim),
                )
                if r in cfg.sa_resolutions:
                    b.sa = {
                        "q": w(cfg.hidden_dim, cfg.head_dim, gain=1.2),
                        "k": w(cfg.hidden_dim, cfg.head_dim, gain=1.2),
                        "v": w(cfg.hidden_dim, cfg.head_dim),
                        "o": w(cfg.head_dim, cfg.channels),
                    }
                if r in cfg.ca_resolutions:
                    b.ca = {
                        "q": w(cfg.hidden_dim, cfg.head_dim, gain=1.2),
                        "k": w(cfg.embed_dim, cfg.head_dim, gain=1.2),
                        "v": w(cfg.embed_dim, cfg.head_dim),
                        "o": w(cfg.head_dim, cfg.channels),
                    }
                blocks.append(b)
                layer_id += 1
        self._skip = torch.as_tensor(np.eye(cfg.channels) + rng.standard_normal((cfg.channels, cfg.channels)) * 0.05)
        # E[eps | z_t] for unit-variance data is sqrt(1 - alpha_t) z_t; this keeps
        # toy trajectories at unit scale under the default schedule
        self._noise_level = np.sqrt(1.0 - AlphaSchedule.default(cfg.T).alphas)
        return blocks

    def encode_prompt(self, text: str) -> PromptEncoding:
        tokens = self.tokenize(text)
        rows = []
        for tok in tokens:
            rng = np.random.default_rng([self.seed, zlib.crc32(tok.encode("utf-8"))])
            rows.append(rng.standard_normal(self.config.embed_dim))
        return PromptEncoding(np.stack(rows), tokens, text)

    def _time_embedding(self, t: int) -> torch.Tensor:
        h = self.config.hidden_dim
        freqs = torch.exp(-math.log(100.0) * torch.arange(h // 2 + h % 2, dtype=torch.float64) / max(h // 2, 1))
        ang = (t / self.T) * 10.0 * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)])[:h]

    def _forward(self, z: torch.Tensor, t: int, prompt: PromptEncoding, capture: CaptureConfig):
        cfg = self.config
        c, s, _ = z.shape
        temb = self._time_embedding(t)
        emb = torch.as_tensor(prompt.token_embeddings)
        if emb.shape[1] != cfg.embed_dim:
            raise ShapeError(f"prompt embed_dim {emb.shape[1]} != backend embed_dim {cfg.embed_dim}")
        pooled = {}
        eps = float(self._noise_level[t]) * (self._skip @ z.reshape(c, -1)).reshape(c, s, s)
        sa_maps, ca_maps = [], []
        n_blocks = len(self._blocks)
        for b in self._blocks:
            r = b.resolution
            f = s // r
            if r not in pooled:
                pooled[r] = z.reshape(c, r, f, r, f).mean(dim=(2, 4)).reshape(c, r * r).T
            x = pooled[r]
            hid = torch.tanh(x @ b.w_in + b.pos + temb @ b.w_time)
            out = torch.zeros((r * r, c), dtype=torch.float64)
            if b.sa is not None:
                o, a = compute_attention(hid @ b.sa["q"], hid @ b.sa["k"], hid @ b.sa["v"], cfg.head_dim)
                out = out + o @ b.sa["o"]
                if r in capture.sa_resolutions:
                    sa_maps.append(AttentionMap(b.layer_id, r, a))
            if b.ca is not None:
                o, a = compute_attention(hid @ b.ca["q"], emb @ b.ca["k"], emb @ b.ca["v"], cfg.head_dim)
                out = out + o @ b.ca["o"]
                if r in capture.ca_resolutions:
                    ca_maps.append(AttentionMap(b.layer_id, r, a))
            up = out.T.reshape(c, r, r).repeat_interleave(f, dim=1).repeat_interleave(f, dim=2)
            eps = eps + up * (cfg.attn_gain / math.sqrt(n_blocks))
        return eps * cfg.eps_scale, sa_maps, ca_maps


def make_toy_backend(seed: int = 0, config=None, **overrides) -> ToyBackend:
    """Build a :class:`ToyBackend` from a config object or key-value mapping."""
    if config is None:
        config = ToyBackendConfig(**overrides)
    elif isinstance(config, dict):
        config = ToyBackendConfig.from_dict({**config, **overrides})
    elif overrides:
        config = ToyBackendConfig(**{**config.to_dict(), **overrides})
    return ToyBackend(seed, config)


_ADAPTERS: dict = {}


def register_adapter(name: str, factory) -> None:
    """Register a real-model backend factory reachable as ``adapter:<name>``."""
    _ADAPTERS[name] = factory


def load_backend(spec: str, seed: int = 0, config: Optional[dict] = None) -> DiffusionBackend:
    if spec == "toy":
        return make_toy_backend(seed, dict(config or {}))
    if spec.startswith("adapter:"):
        name = spec.split(":", 1)[1]
        if name not in _ADAPTERS:
            raise ConfigError(f"no backend adapter registered under {name!r}")
        return _ADAPTERS[name](seed=seed, config=config or {})
    raise ConfigError(f"unknown backend {spec!r}")
