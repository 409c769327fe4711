"""Dataset manifests, preprocessing, augmentation, and stratified splitting.

A dataset manifest is JSON::

    {"scenario": "covid_severity",
     "records": [{"image_id": "p001", "path": "img/p001.png",
                  "label": "mild", "severity_score": 1.5}, ...]}

Scenarios: ``pneumonia_vs_normal`` (classes pneumonia/normal),
``covid_vs_normal`` (covid/normal), ``covid_severity`` (mild/medium/severe).
Severity records carry a 0-6 total opacity score; the class is its bin
(mild below 2, severe above 4, medium in between), so the label field is
optional there and must agree with the bin when present. Images are 8-bit
PNG or JPEG.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    DuplicateId,
    EmptyClass,
    ManifestParseError,
    MissingScore,
    ScoreOutOfRange,
    ZeroSizedImage,
)

# conventional ImageNet channel statistics
IMAGENET_MEANS = (0.485, 0.456, 0.406)
IMAGENET_STDS = (0.229, 0.224, 0.225)

SCENARIO_CLASSES = {
    "pneumonia_vs_normal": ("pneumonia", "normal"),
    "covid_vs_normal": ("covid", "normal"),
    "covid_severity": ("mild", "medium", "severe"),
}


@dataclass(frozen=True)
class Scenario:
    name: str

    def __post_init__(self):
        if self.name not in SCENARIO_CLASSES:
            raise ManifestParseError(
                f"unknown scenario {self.name!r}; expected one of {sorted(SCENARIO_CLASSES)}")

    @property
    def classes(self) -> tuple[str, ...]:
        return SCENARIO_CLASSES[self.name]

    @property
    def has_severity(self) -> bool:
        return self.name == "covid_severity"


@dataclass
class ImageRecord:
    image_id: str
    path: str
    label: str
    severity_score: float | None = None


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (224, 224)
    channel_means: tuple[float, float, float] = IMAGENET_MEANS
    channel_stds: tuple[float, float, float] = IMAGENET_STDS

    def __post_init__(self):
        if any(s <= 0 for s in self.channel_stds):
            raise ManifestParseError("channel stds must be positive")


def severity_bin(score: float) -> str:
    """Opacity-score class: mild below 2, severe above 4, medium otherwise."""
    if not 0.0 <= score <= 6.0:
        raise ScoreOutOfRange(f"severity score {score} outside [0, 6]")
    if score < 2.0:
        return "mild"
    if score > 4.0:
        return "severe"
    return "medium"


def load_manifest(path) -> tuple[list[ImageRecord], Scenario]:
    """Parse and validate a dataset manifest."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestParseError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(doc, dict) or "scenario" not in doc or "records" not in doc:
        raise ManifestParseError("manifest must be an object with scenario and records")
    scenario = Scenario(doc["scenario"])
    entries = doc["records"]
    if not isinstance(entries, list):
        raise ManifestParseError("records must be a list")
    records = []
    seen = set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "image_id" not in e or "path" not in e:
            raise ManifestParseError(f"record {i}: needs image_id and path")
        image_id = str(e["image_id"])
        if image_id in seen:
            raise DuplicateId(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        score = e.get("severity_score")
        if scenario.has_severity:
            if score is None:
                raise MissingScore(f"record {image_id}: severity scenario requires a score")
            score = float(score)
            label = severity_bin(score)  # may raise ScoreOutOfRange
            if "label" in e and e["label"] != label:
                raise ManifestParseError(
                    f"record {image_id}: label {e['label']!r} disagrees with "
                    f"severity bin {label!r} for score {score}")
        else:
            if score is not None:
                raise ManifestParseError(
                    f"record {image_id}: severity_score only valid for covid_severity")
            if "label" not in e:
                raise ManifestParseError(f"record {image_id}: missing label")
            label = str(e["label"])
            if label not in scenario.classes:
                raise ManifestParseError(
                    f"record {image_id}: label {label!r} not in {scenario.classes}")
        records.append(ImageRecord(image_id=image_id, path=str(e["path"]),
                                   label=label, severity_score=score))
    return records, scenario


def save_manifest(path, records: list[ImageRecord], scenario: Scenario) -> None:
    entries = []
    for r in records:
        e = {"image_id": r.image_id, "path": r.path, "label": r.label}
        if r.severity_score is not None:
            e["severity_score"] = r.severity_score
        entries.append(e)
    Path(path).write_text(json.dumps({"scenario": scenario.name, "records": entries}, indent=2))


def decode_image(path) -> np.ndarray:
    """Decode PNG/JPEG into a (h, w) or (h, w, 3) float array of raw 0-255 values."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise DecodeError(f"cannot decode image {path}: {e}") from e
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ZeroSizedImage(f"image {path} has a zero dimension")
    return arr


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Classic bilinear interpolation (half-pixel centers, edge clamped).

    Source coordinate of output pixel i is (i + 0.5) * scale - 0.5.
    """
    h, w = img.shape[:2]
    if out_h == h and out_w == w:
        return img.astype(np.float64, copy=True)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)
    wx = np.clip(xs - x0, 0.0, 1.0)
    im = img.astype(np.float64)
    top = im[y0][:, x0] * (1 - wx) + im[y0][:, x1] * wx
    bot = im[y1][:, x0] * (1 - wx) + im[y1][:, x1] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def preprocess(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Raw decoded image -> normalized (3, h, w) float32 tensor.

    Grayscale is replicated to 3 channels, values scaled to [0, 1], then
    per-channel standardized with the configured means/stds.
    """
    if image.ndim == 2:
        channels = [image, image, image]
    elif image.ndim == 3 and image.shape[2] == 3:
        channels = [image[:, :, c] for c in range(3)]
    else:
        raise DecodeError(f"expected (h, w) or (h, w, 3) image, got {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ZeroSizedImage("empty image")
    th, tw = config.target_size
    out = np.empty((3, th, tw), dtype=np.float32)
    for c in range(3):
        resized = bilinear_resize(channels[c], th, tw) / 255.0
        out[c] = ((resized - config.channel_means[c]) / config.channel_stds[c]).astype(np.float32)
    return out


def unnormalize(tensor: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Invert the normalization back to [0, 1] channel values."""
    out = np.empty_like(tensor, dtype=np.float32)
    for c in range(3):
        out[c] = tensor[c] * config.channel_stds[c] + config.channel_means[c]
    return out


def _rotate_bilinear(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate one channel about its center; bilinear sampling, zeros outside."""
    h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    # inverse map: rotate output coordinates back into the source frame
    sy = cos * (yy - cy) + sin * (xx - cx) + cy
    sx = -sin * (yy - cy) + cos * (xx - cx) + cx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros((h, w), dtype=np.float64)
    src = img.astype(np.float64)
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        out[ok] += wgt[ok] * src[yi[ok], xi[ok]]
    return out


def augment(image: np.ndarray, seed: int, flip_prob: float = 0.5,
            max_rotation_deg: float = 10.0) -> np.ndarray:
    """Seeded horizontal flip + uniform random rotation (zeros fill).

    With flip_prob 0 and max_rotation_deg 0 this is the identity; rotation by
    exactly 0 degrees skips resampling so flips stay involutive.
    """
    rng = np.random.default_rng(seed)
    out = np.asarray(image, dtype=np.float32)
    if rng.random() < flip_prob:
        out = out[..., ::-1].copy()
    angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg)) if max_rotation_deg else 0.0
    if angle != 0.0:
        if out.ndim == 2:
            out = _rotate_bilinear(out, angle).astype(np.float32)
        else:
            out = np.stack([_rotate_bilinear(ch, angle) for ch in out]).astype(np.float32)
    return out


def stratified_split(records: list[ImageRecord], train_fraction: float,
                     seed: int) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Seeded per-class split with largest-remainder rounding of train counts.

    The train set totals floor(n * fraction + 0.5) records; each class
    contributes floor(n_c * fraction) plus at most one largest-remainder
    top-up, so every class lands within one record of its exact share.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not records:
        raise EmptyClass("no records to split")
    by_class: dict[str, list[ImageRecord]] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r)
    target_total = int(np.floor(len(records) * train_fraction + 0.5))
    base = {c: int(np.floor(len(rs) * train_fraction)) for c, rs in by_class.items()}
    remainder = {c: len(rs) * train_fraction - base[c] for c, rs in by_class.items()}
    extras = target_total - sum(base.values())
    for c in sorted(by_class, key=lambda c: (-remainder[c], c))[:max(0, extras)]:
        if base[c] < len(by_class[c]):
            base[c] += 1
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(by_class):
        members = by_class[c]
        picked = set(rng.permutation(len(members))[:base[c]].tolist())
        for i, r in enumerate(members):
            (train if i in picked else test).append(r)
    return train, test
