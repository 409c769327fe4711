"""Synthetic radiograph-style fixtures: three severity classes whose opacity
patches occupy distinct image regions, plus a hand-built two-block CNN that
separates them.

The generator and network pair up: the conv stack is a brightness detector
(channel-summed 3x3 average with the normalization offset folded in, so
background goes negative and is relu-zeroed), the dense head averages the
detector map over one region per class. An image's logit for its own class
is therefore driven by its opacity patch, which both classifies the images
and gives attribution maps a clean per-class geography to cluster on.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .datapipe import (
    IMAGENET_MEANS,
    IMAGENET_STDS,
    ImageRecord,
    Scenario,
    save_manifest,
)
from .nn import LayerSpec, Network, save_network

# per-class patch regions in unit coordinates (y0, y1, x0, x1)
REGIONS = {
    "mild": (0.15, 0.38, 0.12, 0.45),
    "medium": (0.42, 0.65, 0.25, 0.78),
    "severe": (0.66, 0.92, 0.48, 0.92),
}

SCORE_RANGES = {"mild": (0.0, 1.9), "medium": (2.0, 4.0), "severe": (4.1, 6.0)}


def _scaled_region(name: str, size: int) -> tuple[int, int, int, int]:
    y0, y1, x0, x1 = REGIONS[name]
    return (int(y0 * size), int(y1 * size), int(x0 * size), int(x1 * size))


def generate_image(rng: np.random.Generator, class_name: str, size: int = 224) -> np.ndarray:
    """One grayscale uint8 image: noisy gradient background + class-region patch."""
    rows = np.linspace(50.0, 90.0, size)[:, None]
    img = np.broadcast_to(rows, (size, size)) + rng.normal(0.0, 5.0, (size, size))
    y0, y1, x0, x1 = _scaled_region(class_name, size)
    # jitter the patch inside its class region
    ph = int((y1 - y0) * rng.uniform(0.55, 0.85))
    pw = int((x1 - x0) * rng.uniform(0.55, 0.85))
    py = int(rng.integers(y0, y1 - ph + 1))
    px = int(rng.integers(x0, x1 - pw + 1))
    patch = np.zeros((size, size))
    patch[py:py + ph, px:px + pw] = rng.uniform(110.0, 135.0)
    # soft edges keep the patch radiograph-ish
    kernel = np.ones(9) / 9.0
    patch = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 0, patch)
    patch = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, patch)
    return np.clip(img + patch, 0, 255).astype(np.uint8)


def make_synthetic_dataset(out_dir, n_images: int = 120, seed: int = 0,
                           size: int = 224) -> str:
    """Write PNGs plus a covid_severity manifest; returns the manifest path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    img_dir = out_dir / "images"
    img_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = list(REGIONS)
    records = []
    for i in range(n_images):
        cls = classes[i % len(classes)]
        image_id = f"syn{i:04d}"
        path = img_dir / f"{image_id}.png"
        Image.fromarray(generate_image(rng, cls, size), mode="L").save(path)
        lo, hi = SCORE_RANGES[cls]
        records.append(ImageRecord(image_id=image_id, path=str(path), label=cls,
                                   severity_score=round(float(rng.uniform(lo, hi)), 3)))
    manifest_path = out_dir / "dataset.json"
    save_manifest(manifest_path, records, Scenario("covid_severity"))
    return str(manifest_path)


def build_detector_network(size: int = 224) -> Network:
    """Two-block CNN separating the synthetic classes by patch region.

    conv1 sums the normalized channels over a 3x3 window (brightness that is
    negative on background), relu gates it, two 2x2 pools shrink the map, and
    the dense head averages the map over each class's region.
    """
    # channel-averaged brightness: sum_c (v - mean_c)/std_c is affine in v
    conv1_w = np.zeros((1, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        conv1_w[0, c, :, :] = 1.0 / (3 * 9)
    conv1 = LayerSpec("conv2d", {"out_channels": 1, "kernel": [3, 3],
                                 "stride": 1, "padding": 1}, conv1_w)
    conv2_w = np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32)
    conv2 = LayerSpec("conv2d", {"out_channels": 1, "kernel": [3, 3],
                                 "stride": 1, "padding": 1}, conv2_w)
    pool = {"window": 2, "stride": 2}
    grid = size // 4
    head = np.zeros((3, grid * grid), dtype=np.float32)
    for row, cls in enumerate(REGIONS):
        y0, y1, x0, x1 = _scaled_region(cls, grid)
        mask = np.zeros((grid, grid), dtype=np.float32)
        mask[y0:y1, x0:x1] = 1.0
        head[row] = (mask / mask.sum()).ravel()
    dense = LayerSpec("dense", {"in_dim": grid * grid, "out_dim": 3}, head)
    layers = (
        conv1,
        LayerSpec("relu"),
        LayerSpec("maxpool2d", dict(pool)),
        conv2,
        LayerSpec("relu"),
        LayerSpec("maxpool2d", dict(pool)),
        LayerSpec("flatten"),
        dense,
    )
    return Network(layers=layers, input_shape=(3, size, size),
                   class_names=tuple(REGIONS))


def make_demo_model(out_dir, size: int = 224) -> tuple[str, str]:
    """Persist the detector network; returns (manifest_path, blob_path)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "model.json"
    blob = out_dir / "model.bin"
    save_network(build_detector_network(size), manifest, blob)
    return str(manifest), str(blob)
