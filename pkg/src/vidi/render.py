"""Red/blue saliency overlays and per-cluster gallery pages.

Contributions are collapsed to per-pixel scores and normalized by a
symmetric percentile of their magnitude (99th by default, so isolated
outlier pixels cannot wash the map out). Positive scores blend toward red,
negative toward blue, with blend weight alpha * min(|c| / anchor, 1):

    out = (1 - weight) * gray + weight * color

Pixels with zero contribution are bit-identical to the base image, and the
PNG bytes are deterministic for fixed inputs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .attribution import AttributionMap, split_saliency
from .errors import MissingAttribution, ShapeMismatch

RED = np.array([255.0, 0.0, 0.0])
BLUE = np.array([0.0, 0.0, 255.0])


@dataclass(frozen=True)
class OverlayStyle:
    alpha: float = 0.6
    percentile_clip: float = 99.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 50.0 < self.percentile_clip <= 100.0:
            raise ValueError(f"percentile_clip {self.percentile_clip} outside (50, 100]")


@dataclass
class OverlayResult:
    png: bytes
    degenerate: bool = False   # all-zero map: base returned unmodified


@dataclass
class GalleryRow:
    image_id: str
    base_ref: str
    overlay_refs: dict          # class name -> {"fav": ref, "glum": ref}
    predicted_class: str
    severity_bin: str | None = None


@dataclass
class GalleryPage:
    cluster_id: int
    rows: list[GalleryRow]
    size: int
    purity: float               # majority-class fraction of the cluster
    majority_label: str | None
    style: OverlayStyle
    assets: dict = field(default_factory=dict)  # ref -> PNG bytes

    def manifest(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "size": self.size,
            "purity": self.purity,
            "majority_label": self.majority_label,
            "style": {"alpha": self.style.alpha,
                      "percentile_clip": self.style.percentile_clip},
            "rows": [
                {"image_id": r.image_id, "base": r.base_ref,
                 "overlays": r.overlay_refs, "predicted_class": r.predicted_class,
                 "severity_bin": r.severity_bin}
                for r in self.rows
            ],
        }


def to_gray(base: np.ndarray) -> np.ndarray:
    """Coerce a grayscale image (uint8 or [0, 1] float) to uint8."""
    b = np.asarray(base)
    if b.ndim != 2:
        raise ShapeMismatch(f"base image must be 2-D grayscale, got shape {b.shape}")
    if b.dtype == np.uint8:
        return b
    return np.clip(np.round(b.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _per_pixel(map: AttributionMap) -> np.ndarray:
    c = map.contributions
    return c.astype(np.float64).sum(axis=0) if c.ndim == 3 else c.astype(np.float64)


def encode_png(rgb_or_gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb_or_gray).save(buf, format="PNG")
    return buf.getvalue()


def render_overlay(base: np.ndarray, map: AttributionMap,
                   style: OverlayStyle = OverlayStyle()) -> OverlayResult:
    """Blend an attribution map over a grayscale radiograph as PNG bytes."""
    gray = to_gray(base)
    scores = _per_pixel(map)
    if scores.shape != gray.shape:
        raise ShapeMismatch(
            f"map spatial shape {scores.shape} != base shape {gray.shape}")
    anchor = float(np.percentile(np.abs(scores), style.percentile_clip))
    if anchor == 0.0:
        return OverlayResult(png=encode_png(np.stack([gray] * 3, axis=-1)), degenerate=True)
    weight = style.alpha * np.clip(np.abs(scores) / anchor, 0.0, 1.0)
    color = np.where((scores > 0)[..., None], RED, BLUE)
    rgb = (1.0 - weight)[..., None] * gray[..., None].astype(np.float64) \
        + weight[..., None] * color
    return OverlayResult(png=encode_png(np.round(rgb).astype(np.uint8)))


def overlay_refs(image_id: str, class_name: str) -> dict:
    return {"fav": f"{image_id}.{class_name}.fav.png",
            "glum": f"{image_id}.{class_name}.glum.png"}


def render_gallery(cluster_id: int, members: list[dict],
                   maps: dict[str, dict[str, AttributionMap]],
                   bases: dict[str, np.ndarray], class_names: tuple[str, ...],
                   style: OverlayStyle = OverlayStyle()) -> GalleryPage:
    """Compose a cluster page: base + favorable/glum overlay per class per image.

    ``members`` entries need image_id, label, predicted_class, and optionally
    severity_bin; rows come out sorted by image_id and asset bytes are
    attached to the page for the caller to persist.
    """
    rows = []
    assets: dict[str, bytes] = {}
    labels = [m["label"] for m in members]
    majority = max(set(labels), key=lambda l: (labels.count(l), l)) if labels else None
    purity = labels.count(majority) / len(labels) if labels else 0.0
    for member in sorted(members, key=lambda m: m["image_id"]):
        image_id = member["image_id"]
        per_class = maps.get(image_id, {})
        base_ref = f"{image_id}.base.png"
        assets[base_ref] = encode_png(to_gray(bases[image_id]))
        refs: dict[str, dict] = {}
        for cls in class_names:
            if cls not in per_class:
                raise MissingAttribution(f"{image_id}: no attribution map for class {cls!r}")
            m = per_class[cls]
            pair = split_saliency(m)
            fav = AttributionMap(m.image_id, m.target_class, pair.favorable,
                                 m.delta_t, m.baseline_count)
            glum = AttributionMap(m.image_id, m.target_class, pair.glum,
                                  m.delta_t, m.baseline_count)
            refs[cls] = overlay_refs(image_id, cls)
            assets[refs[cls]["fav"]] = render_overlay(bases[image_id], fav, style).png
            assets[refs[cls]["glum"]] = render_overlay(bases[image_id], glum, style).png
        rows.append(GalleryRow(image_id=image_id, base_ref=base_ref, overlay_refs=refs,
                               predicted_class=member["predicted_class"],
                               severity_bin=member.get("severity_bin")))
    return GalleryPage(cluster_id=cluster_id, rows=rows, size=len(members),
                       purity=purity, majority_label=majority, style=style, assets=assets)
