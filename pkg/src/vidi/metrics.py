"""Cluster-quality scoring and classification reports.

Homogeneity and completeness are conditional-entropy ratios over the
class/cluster contingency table (natural logs; the base cancels):

    homogeneity  = 1 - H(class|cluster) / H(class)    (1 when H(class) = 0)
    completeness = 1 - H(cluster|class) / H(cluster)  (1 when H(cluster) = 0)
    v_measure    = harmonic mean of the two

The k sweep fits every k in a range and picks the smallest k whose
homogeneity is within 0.01 of the sweep's best, favoring fewer clusters for
the reviewing expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import FeatureVector, fit_best
from .errors import DomainError, EmptyInput, KTooLarge, LengthMismatch, UnknownLabel


@dataclass
class ContingencyTable:
    counts: np.ndarray           # (n_classes, n_clusters) non-negative ints
    n: int
    classes: tuple               # row labels
    clusters: tuple              # column labels

    def transpose(self) -> "ContingencyTable":
        return ContingencyTable(self.counts.T.copy(), self.n, self.clusters, self.classes)


@dataclass
class ClusterQuality:
    homogeneity: float
    completeness: float
    v_measure: float


@dataclass
class SweepEntry:
    k: int
    quality: ClusterQuality
    inertia: float
    seed: int


@dataclass
class KSweepResult:
    entries: list[SweepEntry]
    chosen_k: int
    policy: str


def contingency(labels, assignments) -> ContingencyTable:
    """Count matrix: rows are classes, columns are cluster indices."""
    labels = list(labels)
    assignments = list(assignments)
    if len(labels) != len(assignments):
        raise LengthMismatch(f"{len(labels)} labels vs {len(assignments)} assignments")
    if not labels:
        raise EmptyInput("empty label vector")
    classes = tuple(sorted(set(labels)))
    clusters = tuple(sorted(set(assignments)))
    row = {c: i for i, c in enumerate(classes)}
    col = {j: i for i, j in enumerate(clusters)}
    counts = np.zeros((len(classes), len(clusters)), dtype=np.int64)
    for lab, a in zip(labels, assignments):
        counts[row[lab], col[a]] += 1
    return ContingencyTable(counts=counts, n=len(labels), classes=classes, clusters=clusters)


def _entropy(freq: np.ndarray, n: int) -> float:
    p = freq[freq > 0] / n
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(counts: np.ndarray, n: int) -> float:
    """H(row | column) from a counts matrix."""
    h = 0.0
    for j in range(counts.shape[1]):
        col = counts[:, j]
        nj = col.sum()
        if nj == 0:
            continue
        p = col[col > 0] / nj
        h += (nj / n) * float(-(p * np.log(p)).sum())
    return h


def homogeneity(t: ContingencyTable) -> float:
    h_class = _entropy(t.counts.sum(axis=1), t.n)
    if h_class == 0.0:
        return 1.0
    return float(np.clip(1.0 - _conditional_entropy(t.counts, t.n) / h_class, 0.0, 1.0))


def completeness(t: ContingencyTable) -> float:
    return homogeneity(t.transpose())


def v_measure(h: float, c: float) -> float:
    if not (0.0 <= h <= 1.0 and 0.0 <= c <= 1.0):
        raise DomainError(f"h={h}, c={c} outside [0, 1]")
    if h + c == 0.0:
        return 0.0
    return 2.0 * h * c / (h + c)


def cluster_quality(t: ContingencyTable) -> ClusterQuality:
    h = homogeneity(t)
    c = completeness(t)
    return ClusterQuality(homogeneity=h, completeness=c, v_measure=v_measure(h, c))


SWEEP_POLICY = "smallest k with homogeneity >= max(homogeneity) - 0.01"


def k_sweep(points: list[FeatureVector], labels, k_range: tuple[int, int], seed: int,
            n_restarts: int = 1) -> KSweepResult:
    """Fit every k in [k_min, k_max], score quality, pick homogeneity-first k."""
    labels = list(labels)
    if len(labels) != len(points):
        raise LengthMismatch(f"{len(labels)} labels vs {len(points)} points")
    k_min, k_max = int(k_range[0]), int(k_range[1])
    if not 2 <= k_min <= k_max <= len(points):
        raise KTooLarge(f"k range [{k_min}, {k_max}] outside [2, {len(points)}]")
    by_id = {p.image_id: lab for p, lab in zip(points, labels)}
    entries = []
    for k in range(k_min, k_max + 1):
        model = fit_best(points, k, seed, n_restarts)
        ordered_ids = [p.image_id for p in points]
        t = contingency([by_id[i] for i in ordered_ids],
                        [model.assignments[i] for i in ordered_ids])
        entries.append(SweepEntry(k=k, quality=cluster_quality(t),
                                  inertia=model.inertia, seed=model.seed))
    best_h = max(e.quality.homogeneity for e in entries)
    chosen_k = next(e.k for e in entries if e.quality.homogeneity >= best_h - 0.01)
    return KSweepResult(entries=entries, chosen_k=chosen_k, policy=SWEEP_POLICY)


@dataclass
class PerClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    flagged: bool   # a zero denominator forced some metric to 0


@dataclass
class ClassificationReport:
    classes: tuple
    confusion: np.ndarray        # rows true class, columns predicted
    accuracy: float
    per_class: list[PerClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float


def classification_report(y_true, y_pred, classes=None) -> ClassificationReport:
    """Confusion-matrix metrics with one-vs-rest per-class precision/recall/F1."""
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred):
        raise LengthMismatch(f"{len(y_true)} true vs {len(y_pred)} predicted")
    if not y_true:
        raise EmptyInput("empty label vectors")
    if classes is None:
        classes = tuple(sorted(set(y_true) | set(y_pred)))
    else:
        classes = tuple(classes)
        known = set(classes)
        for lab in y_true + y_pred:
            if lab not in known:
                raise UnknownLabel(f"label {lab!r} not in class set {classes}")
    idx = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[idx[t], idx[p]] += 1
    accuracy = float(np.trace(confusion)) / len(y_true)
    per_class = []
    for i, label in enumerate(classes):
        tp = float(confusion[i, i])
        support = int(confusion[i, :].sum())
        predicted = float(confusion[:, i].sum())
        flagged = False
        if predicted == 0:
            precision, flagged = 0.0, True
        else:
            precision = tp / predicted
        if support == 0:
            recall, flagged = 0.0, True
        else:
            recall = tp / support
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_class.append(PerClassMetrics(label=str(label), precision=precision,
                                         recall=recall, f1=f1, support=support,
                                         flagged=flagged))
    return ClassificationReport(
        classes=classes,
        confusion=confusion,
        accuracy=accuracy,
        per_class=per_class,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
    )
