"""Metric providers for the benchmark harness.

Structure providers score how far the edited image's layout drifted from the
source (lower is better).  Alignment providers score how well an image matches
the target text.  Real models are optional plug-ins; the stubs are
deterministic and dependency-free.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError


def _as_chw(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"image must be 2-D or (C, H, W), got {a.shape}")
    return a


def self_similarity(img) -> np.ndarray:
    """Cosine similarity between all pairs of spatial feature vectors."""
    a = _as_chw(img)
    feats = a.reshape(a.shape[0], -1).T
    feats = feats - feats.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats / np.maximum(norms, 1e-12)
    return feats @ feats.T


class SelfSimilarityStub:
    """Mean squared difference of pixel self-similarity matrices (0 for identical images)."""

    id = "stub-selfsim"

    def score(self, source, edited) -> float:
        s, e = self_similarity(source), self_similarity(edited)
        if s.shape != e.shape:
            raise ValueError("structure scoring needs images of equal size")
        return float(np.mean((s - e) ** 2))


class CaptionStub:
    """Fraction of target tokens that appear in a caption of the edited image.

    The caption is passed in explicitly or read from a sidecar text file.
    Without a caption the score is 0.
    """

    id = "stub-caption"

    def score(self, image, item, caption: Optional[str] = None) -> float:
        tokens = [t.lower() for t in item.target_tokens]
        if not tokens:
            return 0.0
        if caption is None:
            return 0.0
        words = set(caption.lower().replace(",", " ").replace(".", " ").split())
        hits = sum(all(w in words for w in tok.split()) for tok in tokens)
        return hits / len(tokens)


class DinoStructure:
    """DINO-ViT token self-similarity distance (needs ``transformers`` and local weights).

    Weights are looked up in ``$UNIFYEDIT_DINO_PATH`` (default ``facebook/dino-vitb8``)
    without network access.
    """

    id = "dino-vit"

    def __init__(self):
        try:
            import torch  # noqa: F401
            from transformers import ViTModel
        except ImportError as exc:
            raise ConfigError(f"provider {self.id!r} needs transformers: {exc}") from exc
        path = os.environ.get("UNIFYEDIT_DINO_PATH", "facebook/dino-vitb8")
        try:
            self.model = ViTModel.from_pretrained(path, local_files_only=True).eval()
        except Exception as exc:
            raise ConfigError(f"provider {self.id!r} could not load weights from {path!r}: {exc}") from exc

    def _token_selfsim(self, img):
        import torch

        x = torch.as_tensor(_as_chw(img)[:3], dtype=torch.float32)[None]
        x = torch.nn.functional.interpolate(x, size=(224, 224), mode="bilinear", align_corners=False)
        with torch.no_grad():
            tokens = self.model(pixel_values=x).last_hidden_state[0, 1:]
        tokens = torch.nn.functional.normalize(tokens, dim=-1)
        return (tokens @ tokens.T).numpy()

    def score(self, source, edited) -> float:
        return float(np.mean((self._token_selfsim(source) - self._token_selfsim(edited)) ** 2))


class ClipAlignment:
    """CLIP ViT-L/14 text-image score, ``100 * max(cos, 0)``.

    Weights from ``$UNIFYEDIT_CLIP_PATH`` (default ``openai/clip-vit-large-patch14``).
    """

    id = "clip-vit-l14"

    def __init__(self):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:
            raise ConfigError(f"provider {self.id!r} needs transformers: {exc}") from exc
        path = os.environ.get("UNIFYEDIT_CLIP_PATH", "openai/clip-vit-large-patch14")
        try:
            self.model = CLIPModel.from_pretrained(path, local_files_only=True).eval()
            self.tokenizer = CLIPTokenizer.from_pretrained(path, local_files_only=True)
        except Exception as exc:
            raise ConfigError(f"provider {self.id!r} could not load weights from {path!r}: {exc}") from exc

    def score(self, image, item, caption=None) -> float:
        import torch

        x = torch.as_tensor(_as_chw(image)[:3], dtype=torch.float32)[None]
        x = torch.nn.functional.interpolate(x, size=(224, 224), mode="bicubic", align_corners=False)
        text = self.tokenizer([item.target_prompt], padding=True, return_tensors="pt")
        with torch.no_grad():
            img_emb = self.model.get_image_features(pixel_values=x)
            txt_emb = self.model.get_text_features(**text)
        cos = torch.nn.functional.cosine_similarity(img_emb, txt_emb).item()
        return 100.0 * max(cos, 0.0)


_STRUCTURE: dict = {SelfSimilarityStub.id: SelfSimilarityStub, DinoStructure.id: DinoStructure}
_ALIGNMENT: dict = {CaptionStub.id: CaptionStub, ClipAlignment.id: ClipAlignment}


def register_structure_provider(pid: str, factory: Callable) -> None:
    _STRUCTURE[pid] = factory


def register_alignment_provider(pid: str, factory: Callable) -> None:
    _ALIGNMENT[pid] = factory


def get_structure_provider(pid: str):
    if pid not in _STRUCTURE:
        raise ConfigError(f"structure provider {pid!r} is not registered")
    return _STRUCTURE[pid]()


def get_alignment_provider(pid: str):
    if pid not in _ALIGNMENT:
        raise ConfigError(f"alignment provider {pid!r} is not registered")
    return _ALIGNMENT[pid]()


def sidecar_caption(path) -> Optional[str]:
    """Caption stored next to an image as ``<stem>.caption.txt``, if any."""
    if path is None:
        return None
    p = Path(path)
    side = p.with_name(p.name.split(".")[0] + ".caption.txt")
    return side.read_text(encoding="utf-8").strip() if side.exists() else None
