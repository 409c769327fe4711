"""K-means++ clustering of images embedded in attribution space.

The embedding turns each image's per-class contribution maps into one flat
vector: channels are summed to a per-pixel score, the map is mean-pooled to
a small grid (14x14 by default), the per-class grids are concatenated, and
the result is optionally L2-normalized. Clustering is plain Lloyd iteration
over Euclidean distance with D^2-weighted probabilistic seeding, fully
deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionMap
from .errors import (
    DimensionMismatch,
    EmptyInput,
    InconsistentShapes,
    KTooLarge,
)


@dataclass(frozen=True)
class EmbeddingConfig:
    pool: int = 14
    l2_normalize: bool = True

    @property
    def provenance(self) -> str:
        return f"class-maps|channel-sum|meanpool{self.pool}|l2={self.l2_normalize}"


@dataclass
class FeatureVector:
    image_id: str
    values: np.ndarray
    provenance: str


@dataclass
class ClusterModel:
    """Fitted k-means model: centroids, assignments, and the fit trajectory."""

    k: int
    centroids: np.ndarray              # (k, d) float64
    assignments: dict[str, int]
    inertia: float
    iterations: int
    seed: int
    inertia_history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def mean_pool(grid: np.ndarray, p: int) -> np.ndarray:
    """Adaptive mean pooling of a 2-D map onto a p x p grid.

    Cell (i, j) averages rows floor(i*H/p)..floor((i+1)*H/p); the grid is
    clamped so every cell covers at least one element.
    """
    h, w = grid.shape
    ph, pw = min(p, h), min(p, w)
    rows = [(i * h) // ph for i in range(ph + 1)]
    cols = [(j * w) // pw for j in range(pw + 1)]
    out = np.empty((ph, pw), dtype=np.float64)
    for i in range(ph):
        for j in range(pw):
            out[i, j] = grid[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean()
    return out


def _per_pixel(contributions: np.ndarray) -> np.ndarray:
    """Collapse an attribution tensor to a per-pixel score (sum over channels)."""
    if contributions.ndim == 3:
        return contributions.astype(np.float64).sum(axis=0)
    if contributions.ndim == 2:
        return contributions.astype(np.float64)
    if contributions.ndim == 1:
        return contributions.astype(np.float64).reshape(1, -1)
    raise InconsistentShapes(f"cannot embed map of rank {contributions.ndim}")


def embed(per_image_maps: dict[str, list[AttributionMap]],
          config: EmbeddingConfig = EmbeddingConfig()) -> list[FeatureVector]:
    """Embed each image's per-class maps into one fixed-dimension vector."""
    if not per_image_maps:
        raise EmptyInput("no attribution maps to embed")
    ref_shape = None
    ref_classes = None
    out = []
    for image_id, maps in per_image_maps.items():
        if ref_classes is None:
            ref_classes = len(maps)
            ref_shape = maps[0].contributions.shape
        if len(maps) != ref_classes:
            raise InconsistentShapes(
                f"{image_id}: {len(maps)} class maps, expected {ref_classes}")
        parts = []
        for cls, m in enumerate(maps):
            if m.contributions.shape != ref_shape:
                raise InconsistentShapes(
                    f"{image_id} class {cls}: map shape {m.contributions.shape} != {ref_shape}")
            parts.append(mean_pool(_per_pixel(m.contributions), config.pool).ravel())
        v = np.concatenate(parts)
        if config.l2_normalize:
            norm = np.linalg.norm(v)
            if norm > 0:
                v = v / norm
        out.append(FeatureVector(image_id=image_id, values=v.astype(np.float32),
                                 provenance=config.provenance))
    return out


def _points_matrix(points: list[FeatureVector]) -> np.ndarray:
    if not points:
        raise EmptyInput("no feature vectors")
    dims = {p.values.shape for p in points}
    if len(dims) != 1:
        raise InconsistentShapes(f"mixed feature dimensions: {sorted(dims)}")
    return np.stack([p.values.astype(np.float64) for p in points])


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def seed_kmeanspp(points: list[FeatureVector], k: int, seed: int) -> np.ndarray:
    """D^2-weighted seeding: uniform first pick, then squared-distance sampling."""
    x = _points_matrix(points)
    n_distinct = np.unique(x, axis=0).shape[0]
    if not 1 <= k <= n_distinct:
        raise KTooLarge(f"k={k} outside [1, {n_distinct}] distinct points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(x)))]
    d2 = _sq_dists(x, x[chosen[-1]][None, :])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:  # unreachable given the distinct-point precondition
            candidates = [i for i in range(len(x)) if i not in chosen]
            chosen.append(int(rng.choice(candidates)))
        else:
            chosen.append(int(rng.choice(len(x), p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists(x, x[chosen[-1]][None, :])[:, 0])
    return x[chosen].copy()


def fit(points: list[FeatureVector], k: int, seed: int,
        max_iter: int = 300, tol: float = 1e-4) -> ClusterModel:
    """Lloyd iteration from a k-means++ seeding.

    Empty clusters are repaired by reseeding at the point farthest from its
    assigned centroid; the inertia sequence is checked non-increasing at
    every step.
    """
    x = _points_matrix(points)
    centroids = seed_kmeanspp(points, k, seed)
    history: list[float] = []
    iterations = 0

    def nearest(cents):
        d2 = _sq_dists(x, cents)
        labels = d2.argmin(axis=1)
        return labels, d2

    for _ in range(max_iter):
        iterations += 1
        labels, d2 = nearest(centroids)
        for j in range(k):  # repair empties in index order
            if not (labels == j).any():
                per_point = d2[np.arange(len(x)), labels]
                far = int(per_point.argmax())
                centroids[j] = x[far]
                labels[far] = j
                d2[far, :] = _sq_dists(x[far][None, :], centroids)[0]
                d2[:, j] = _sq_dists(x, centroids[j][None, :])[:, 0]
        inertia = float(np.sum((x - centroids[labels]) ** 2))
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise AssertionError(f"inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        new_centroids = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < tol:
            break

    labels, d2 = nearest(centroids)  # assignments consistent with final centroids
    inertia = float(d2[np.arange(len(x)), labels].sum())
    if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
        raise AssertionError(f"inertia increased on final pass: {history[-1]} -> {inertia}")
    history.append(inertia)
    assignments = {p.image_id: int(l) for p, l in zip(points, labels)}
    return ClusterModel(k=k, centroids=centroids, assignments=assignments,
                        inertia=inertia, iterations=iterations, seed=seed,
                        inertia_history=history)


def fit_best(points: list[FeatureVector], k: int, seed: int, n_restarts: int = 5) -> ClusterModel:
    """Best of n consecutive seeds by inertia; the winning seed is recorded."""
    best = None
    for s in range(seed, seed + max(1, n_restarts)):
        model = fit(points, k, s)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def assign(model: ClusterModel, point: FeatureVector) -> int:
    """Nearest centroid (Euclidean, lowest index on ties)."""
    v = point.values.astype(np.float64)
    if v.shape != (model.dim,):
        raise DimensionMismatch(f"point dim {v.shape} != model dim {model.dim}")
    d2 = ((model.centroids - v[None, :]) ** 2).sum(axis=1)
    return int(d2.argmin())
