"""Benchmark manifests, metric evaluation, aggregation and trace export.

A manifest is JSON Lines: one object per line with keys ``id``, ``image_path``,
``mask_path`` (optional for global style edits), ``source_prompt``,
``target_prompt``, ``target_tokens``, ``edit_type`` and optional ``bbox``
``[x, y, w, h]``.  Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, JoinError, ManifestError, ShapeError
from .pipeline import EDIT_TYPES, GLOBAL_EDIT_TYPES, TRACE_COLUMNS, GradientTrace, TraceRow

REQUIRED_KEYS = ("id", "image_path", "source_prompt", "target_prompt", "target_tokens", "edit_type")


@dataclass(frozen=True)
class BenchItem:
    id: str
    image_path: str
    source_prompt: str
    target_prompt: str
    target_tokens: tuple
    edit_type: str
    mask_path: Optional[str] = None
    bbox: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        if self.bbox is not None:
            object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if self.edit_type not in EDIT_TYPES:
            raise ValueError(f"unknown edit_type {self.edit_type!r}")
        if self.mask_path is None and self.edit_type not in GLOBAL_EDIT_TYPES:
            raise ValueError(f"edit_type {self.edit_type!r} requires mask_path")
        if self.bbox is not None:
            if len(self.bbox) != 4:
                raise ValueError("bbox must be [x, y, w, h]")
            x, y, w, h = self.bbox
            if x < 0 or y < 0 or w <= 0 or h <= 0:
                raise ValueError(f"bbox {self.bbox} must have x, y >= 0 and positive size")

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "source_prompt": self.source_prompt,
            "target_prompt": self.target_prompt,
            "target_tokens": list(self.target_tokens),
            "edit_type": self.edit_type,
            "bbox": None if self.bbox is None else list(self.bbox),
        }
        return rec

    def resolve(self, root) -> "BenchItem":
        """Copy with relative paths anchored at ``root``."""
        def fix(p):
            if p is None or Path(p).is_absolute():
                return p
            return str(Path(root) / p)
        return BenchItem(self.id, fix(self.image_path), self.source_prompt, self.target_prompt,
                         self.target_tokens, self.edit_type, fix(self.mask_path), self.bbox)


def load_manifest(path) -> list:
    items, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from exc
            if not isinstance(rec, dict):
                raise ManifestError("record must be a JSON object", lineno)
            missing = [k for k in REQUIRED_KEYS if k not in rec]
            if missing:
                raise ManifestError(f"missing keys {missing}", lineno)
            unknown = set(rec) - set(REQUIRED_KEYS) - {"mask_path", "bbox"}
            if unknown:
                raise ManifestError(f"unknown keys {sorted(unknown)}", lineno)
            if not isinstance(rec["target_tokens"], list):
                raise ManifestError("target_tokens must be a list", lineno)
            try:
                item = BenchItem(
                    id=str(rec["id"]),
                    image_path=rec["image_path"],
                    source_prompt=rec["source_prompt"],
                    target_prompt=rec["target_prompt"],
                    target_tokens=rec["target_tokens"],
                    edit_type=rec["edit_type"],
                    mask_path=rec.get("mask_path"),
                    bbox=rec.get("bbox"),
                )
            except (ValueError, TypeError) as exc:
                raise ManifestError(str(exc), lineno) from exc
            if item.id in seen:
                raise ManifestError(f"duplicate id {item.id!r}", lineno)
            seen.add(item.id)
            items.append(item)
    return items


def dump_manifest(items, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_record(), sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class MetricRecord:
    id: str
    dino_similarity: float
    clip_score: float
    provider_ids: tuple

    def __post_init__(self):
        if not (np.isfinite(self.dino_similarity) and np.isfinite(self.clip_score)):
            raise ValueError(f"{self.id}: metric values must be finite")
        if self.dino_similarity < 0:
            raise ValueError(f"{self.id}: structure distance must be >= 0")
        object.__setattr__(self, "provider_ids", tuple(self.provider_ids))

    def to_dict(self):
        d = asdict(self)
        d["provider_ids"] = list(self.provider_ids)
        return d


def crop(img, bbox) -> np.ndarray:
    a = np.asarray(img)
    if bbox is None:
        return a
    x, y, w, h = bbox
    H, W = a.shape[-2:]
    if x + w > W or y + h > H:
        raise ShapeError(f"bbox {bbox} exceeds image bounds {W}x{H}")
    return a[..., y:y + h, x:x + w]


def evaluate(source_image, edited_image, item: BenchItem, structure_provider, alignment_provider,
             caption: Optional[str] = None) -> MetricRecord:
    """Structure distance on full images; text alignment on the bbox crop (tight, no padding)."""
    if structure_provider is None:
        raise ConfigError("structure provider is not configured")
    if alignment_provider is None:
        raise ConfigError("alignment provider is not configured")
    src, edt = np.asarray(source_image), np.asarray(edited_image)
    if src.shape != edt.shape:
        raise ShapeError(f"source {src.shape} and edited {edt.shape} images differ in size")
    dino = structure_provider.score(src, edt)
    clip = alignment_provider.score(crop(edt, item.bbox), item, caption)
    return MetricRecord(item.id, float(dino), float(clip),
                        (getattr(structure_provider, "id", type(structure_provider).__name__),
                         getattr(alignment_provider, "id", type(alignment_provider).__name__)))


@dataclass
class Summary:
    per_type: dict = field(default_factory=dict)
    scatter: list = field(default_factory=list)

    def to_dict(self):
        return {"per_type": self.per_type, "scatter": self.scatter}


def aggregate(records, manifest, method_tag: str = "unifyedit") -> Summary:
    """Per-edit-type means plus one scatter row per record.

    Records are sorted by id first, so the result does not depend on the order
    they arrive in.  Edit types with no records are left out.
    """
    by_id = {item.id: item for item in manifest}
    buckets = defaultdict(list)
    scatter = []
    for rec in sorted(records, key=lambda r: r.id):
        if rec.id not in by_id:
            raise JoinError(f"record {rec.id!r} has no manifest entry")
        et = by_id[rec.id].edit_type
        buckets[et].append(rec)
        scatter.append({"method": method_tag, "edit_type": et, "id": rec.id,
                        "clip": rec.clip_score, "dino": rec.dino_similarity})
    per_type = {}
    for et in EDIT_TYPES:
        recs = buckets.get(et)
        if not recs:
            continue
        per_type[et] = {
            "count": len(recs),
            "mean_dino_similarity": float(np.mean([r.dino_similarity for r in recs])),
            "mean_clip_score": float(np.mean([r.clip_score for r in recs])),
        }
    return Summary(per_type, scatter)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.9g}"


def emit_trace(trace: GradientTrace, path) -> Path:
    """Write the trace as CSV (9 significant digits, empty cell for unevaluated terms)."""
    path = Path(path)
    rows = trace.rows if isinstance(trace, GradientTrace) else list(trace)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "iter", *TRACE_COLUMNS[2:]])
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in TRACE_COLUMNS])
    return path


def read_trace(path) -> GradientTrace:
    trace = GradientTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            vals = {c: (None if rec[c] == "" else float(rec[c])) for c in TRACE_COLUMNS[2:]}
            trace.append(TraceRow(t=int(rec["t"]), iter=int(rec["iter"]), **vals))
    return trace


def trace_long_format(trace: GradientTrace) -> list:
    """``(t, iter, series, value)`` rows, skipping empty cells."""
    out = []
    for r in trace:
        for c in TRACE_COLUMNS[2:]:
            v = getattr(r, c)
            if v is not None:
                out.append((r.t, r.iter, c, v))
    return out
