"""End-to-end orchestration: load, attribute, cluster, score, render, persist.

``create_run`` registers a pending run; ``execute_run`` performs the whole
pipeline and flips the status to complete (or failed, with a stored error
report). Reclustering reuses the stored feature vectors and attribution
assets of a parent run, so only the clustering, metrics, and gallery
grouping are recomputed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attribution import AttributionMap, Baseline, attribute_all_classes
from .clustering import ClusterModel, EmbeddingConfig, FeatureVector, embed, fit, fit_best
from .datapipe import (
    PreprocessConfig,
    Scenario,
    bilinear_resize,
    decode_image,
    load_manifest,
    preprocess,
)
from .errors import (
    ClusterNotFound,
    ConfigError,
    EmptyInput,
    InvalidLabel,
    RunNotFound,
    VidiError,
)
from .metrics import KSweepResult, cluster_quality, contingency, k_sweep
from .nn import Network, load_network, predict
from .render import OverlayStyle, render_gallery
from .store import VERDICTS, RunRecord, RunStore, utc_now


@dataclass
class RunConfig:
    manifest: str
    model_manifest: str
    model_blob: str
    k: int | None = None
    k_range: tuple[int, int] | None = None
    seed: int = 0
    n_restarts: int = 5
    baselines: dict = field(default_factory=lambda: {"kind": "zeros"})
    embedding: dict = field(default_factory=dict)
    overlay: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        for key in ("manifest", "model_manifest", "model_blob"):
            if key not in kwargs:
                raise ConfigError(f"config missing required field {key!r}")
        cfg = RunConfig(**kwargs)
        if cfg.k_range is not None:
            cfg.k_range = (int(cfg.k_range[0]), int(cfg.k_range[1]))
        return cfg

    def validate(self) -> None:
        if (self.k is None) == (self.k_range is None):
            raise ConfigError("exactly one of k and k_range must be set")
        for name in ("manifest", "model_manifest", "model_blob"):
            if not Path(getattr(self, name)).exists():
                raise ConfigError(f"{name} path does not exist: {getattr(self, name)}")

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(pool=int(self.embedding.get("pool", 14)),
                               l2_normalize=bool(self.embedding.get("l2_normalize", True)))

    def overlay_style(self) -> OverlayStyle:
        return OverlayStyle(alpha=float(self.overlay.get("alpha", 0.6)),
                            percentile_clip=float(self.overlay.get("percentile_clip", 99.0)))

    def to_dict(self) -> dict:
        return {"manifest": self.manifest, "model_manifest": self.model_manifest,
                "model_blob": self.model_blob, "k": self.k,
                "k_range": list(self.k_range) if self.k_range else None,
                "seed": self.seed, "n_restarts": self.n_restarts,
                "baselines": self.baselines, "embedding": self.embedding,
                "overlay": self.overlay}


def create_run(store: RunStore, config: RunConfig, parent_run: str | None = None) -> RunRecord:
    config.validate()
    return store.create_run(config.to_dict(), parent_run=parent_run)


def _luminance_base(path: str, h: int, w: int) -> np.ndarray:
    raw = decode_image(path)
    if raw.ndim == 3:
        raw = raw.mean(axis=2)
    resized = bilinear_resize(raw, h, w)
    return np.clip(np.round(resized), 0, 255).astype(np.uint8)


def _make_baselines(policy: dict, tensors: dict[str, np.ndarray], net: Network,
                    ) -> list[Baseline]:
    kind = policy.get("kind", "zeros")
    baselines = [Baseline.zeros(net)]
    if kind == "zeros":
        return baselines
    if kind == "background":
        count = int(policy.get("count", 10))
        rng = np.random.default_rng(int(policy.get("seed", 0)))
        ids = sorted(tensors)
        picks = rng.choice(len(ids), size=min(count, len(ids)), replace=False)
        baselines += [Baseline(tensors[ids[i]]) for i in sorted(picks)]
        return baselines
    raise ConfigError(f"unknown baseline policy kind {kind!r}")


def _write_attr_exports(store: RunStore, run_id: str, image_id: str,
                        maps: list[AttributionMap], class_names) -> None:
    for m in maps:
        cls = class_names[m.target_class]
        stem = f"attr/{image_id}.{cls}"
        store.write_bytes(run_id, f"{stem}.bin",
                          np.ascontiguousarray(m.contributions, dtype="<f4").tobytes())
        store.write_json(run_id, f"{stem}.json", {
            "image_id": image_id, "class_name": cls, "delta_t": m.delta_t,
            "baseline_count": m.baseline_count, "shape": list(m.contributions.shape),
        })


def _write_features(store: RunStore, run_id: str, features: list[FeatureVector]) -> None:
    blob = np.concatenate([f.values.astype("<f4") for f in features])
    store.write_bytes(run_id, "features.bin", blob.tobytes())
    store.write_json(run_id, "features.json", {
        "image_ids": [f.image_id for f in features],
        "dim": int(features[0].values.size),
        "provenance": features[0].provenance,
        "dtype": "<f4",
        "blob": "features.bin",
    })


def load_features(store: RunStore, run_id: str) -> list[FeatureVector]:
    meta = store.read_json(run_id, "features.json")
    raw = np.frombuffer(store.asset_path(run_id, meta["blob"]).read_bytes(), dtype="<f4")
    dim = int(meta["dim"])
    ids = meta["image_ids"]
    return [FeatureVector(image_id=i, values=raw[j * dim:(j + 1) * dim].copy(),
                          provenance=meta["provenance"])
            for j, i in enumerate(ids)]


def _write_clusters(store: RunStore, run_id: str, model: ClusterModel) -> None:
    store.write_bytes(run_id, "centroids.bin",
                      np.ascontiguousarray(model.centroids, dtype="<f4").tobytes())
    store.write_json(run_id, "clusters.json", {
        "k": model.k, "seed": model.seed, "inertia": model.inertia,
        "centroid_blob_ref": "centroids.bin",
        "assignments": model.assignments,
    })


def _write_sweep(store: RunStore, run_id: str, sweep: KSweepResult) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["k", "homogeneity", "completeness", "v_measure", "inertia", "seed"])
    entries = []
    for e in sweep.entries:
        writer.writerow([e.k, f"{e.quality.homogeneity:.10f}", f"{e.quality.completeness:.10f}",
                         f"{e.quality.v_measure:.10f}", f"{e.inertia:.10f}", e.seed])
        entries.append({"k": e.k, "homogeneity": e.quality.homogeneity,
                        "completeness": e.quality.completeness,
                        "v_measure": e.quality.v_measure,
                        "inertia": e.inertia, "seed": e.seed})
    store.write_bytes(run_id, "sweep.csv", buf.getvalue().encode())
    store.write_json(run_id, "sweep.json",
                     {"entries": entries, "chosen_k": sweep.chosen_k, "policy": sweep.policy})


def _severity_bin_of(record_entry: dict) -> str | None:
    return record_entry["label"] if record_entry.get("severity_score") is not None else None


def _write_galleries(store: RunStore, run_id: str, model: ClusterModel, dataset: dict,
                     maps_by_image: dict[str, dict[str, AttributionMap]] | None,
                     bases: dict[str, np.ndarray] | None, style: OverlayStyle) -> None:
    """Group images by cluster and emit gallery manifests (+ overlays if given).

    With ``maps_by_image``/``bases`` present the overlay PNGs are rendered and
    written; otherwise existing ``overlays/`` assets are assumed (recluster).
    """
    class_names = tuple(dataset["class_names"])
    by_image = {e["image_id"]: e for e in dataset["images"]}
    for cid in range(model.k):
        member_ids = sorted(i for i, c in model.assignments.items() if c == cid)
        members = [{"image_id": i, "label": by_image[i]["label"],
                    "predicted_class": by_image[i]["predicted_class"],
                    "severity_bin": _severity_bin_of(by_image[i])}
                   for i in member_ids]
        if maps_by_image is not None:
            page = render_gallery(cid, members, maps_by_image, bases, class_names, style)
            for ref, data in page.assets.items():
                store.write_bytes(run_id, f"overlays/{ref}", data)
            manifest = page.manifest()
        else:
            from .render import overlay_refs
            labels = [m["label"] for m in members]
            majority = max(set(labels), key=lambda l: (labels.count(l), l)) if labels else None
            manifest = {
                "cluster_id": cid, "size": len(members),
                "purity": labels.count(majority) / len(labels) if labels else 0.0,
                "majority_label": majority,
                "style": {"alpha": style.alpha, "percentile_clip": style.percentile_clip},
                "rows": [{"image_id": m["image_id"], "base": f"{m['image_id']}.base.png",
                          "overlays": {c: overlay_refs(m["image_id"], c) for c in class_names},
                          "predicted_class": m["predicted_class"],
                          "severity_bin": m["severity_bin"]} for m in members],
            }
        for row in manifest["rows"]:
            row["base"] = f"overlays/{row['base']}"
            row["overlays"] = {c: {pol: f"overlays/{ref}" for pol, ref in refs.items()}
                               for c, refs in row["overlays"].items()}
        store.write_json(run_id, f"galleries/{cid}.json", manifest)


def _quality_payload(dataset: dict, model: ClusterModel) -> dict:
    ids = [e["image_id"] for e in dataset["images"]]
    labels = [e["label"] for e in dataset["images"]]
    t = contingency(labels, [model.assignments[i] for i in ids])
    q = cluster_quality(t)
    return {"homogeneity": q.homogeneity, "completeness": q.completeness,
            "v_measure": q.v_measure, "k": model.k, "inertia": model.inertia,
            "seed": model.seed}


def execute_run(store: RunStore, run_id: str) -> RunRecord:
    """Run the full pipeline for a pending run; idempotent for finished ones."""
    record = store.load_record(run_id)
    if record.status in ("complete", "failed"):
        return record
    record = store.transition(record, "running")
    try:
        config = RunConfig.from_dict(record.config)
        config.validate()
        records, scenario = load_manifest(config.manifest)
        if not records:
            raise EmptyInput("dataset manifest has no records")
        net = load_network(config.model_manifest, config.model_blob)
        if set(net.class_names) != set(scenario.classes):
            raise ConfigError(
                f"model classes {net.class_names} != scenario classes {scenario.classes}")
        if len(net.input_shape) != 3:
            raise ConfigError(f"pipeline expects an image network, got {net.input_shape}")
        _, h, w = net.input_shape
        pre_cfg = PreprocessConfig(target_size=(h, w))

        tensors, bases = {}, {}
        for r in records:
            raw = decode_image(r.path)
            tensors[r.image_id] = preprocess(raw, pre_cfg)
            bases[r.image_id] = _luminance_base(r.path, h, w)

        dataset = {"scenario": scenario.name, "class_names": list(net.class_names),
                   "images": []}
        for r in records:
            cls_idx, probs = predict(net, tensors[r.image_id])
            dataset["images"].append({
                "image_id": r.image_id, "path": r.path, "label": r.label,
                "severity_score": r.severity_score,
                "predicted_class": net.class_names[cls_idx],
                "probabilities": [float(p) for p in probs],
            })
        store.write_json(run_id, "dataset.json", dataset)

        baselines = _make_baselines(config.baselines, tensors, net)
        maps_by_image: dict[str, dict[str, AttributionMap]] = {}
        ordered_maps: dict[str, list[AttributionMap]] = {}
        for r in records:
            maps = attribute_all_classes(net, tensors[r.image_id], baselines, r.image_id)
            ordered_maps[r.image_id] = maps
            maps_by_image[r.image_id] = {net.class_names[m.target_class]: m for m in maps}
            _write_attr_exports(store, run_id, r.image_id, maps, net.class_names)

        features = embed(ordered_maps, config.embedding_config())
        _write_features(store, run_id, features)

        labels_by_id = {r.image_id: r.label for r in records}
        labels = [labels_by_id[f.image_id] for f in features]
        if config.k_range is not None:
            sweep = k_sweep(features, labels, config.k_range, config.seed,
                            n_restarts=config.n_restarts)
            _write_sweep(store, run_id, sweep)
            entry = next(e for e in sweep.entries if e.k == sweep.chosen_k)
            model = fit(features, entry.k, entry.seed)
            record.has_sweep = True
            record.chosen_k = sweep.chosen_k
        else:
            model = fit_best(features, int(config.k), config.seed, config.n_restarts)
            record.chosen_k = model.k
        _write_clusters(store, run_id, model)
        _write_galleries(store, run_id, model, dataset, maps_by_image, bases,
                         config.overlay_style())

        record.scenario = scenario.name
        record.class_names = list(net.class_names)
        record.n_images = len(records)
        record.quality = _quality_payload(dataset, model)
        return store.transition(record, "complete")
    except Exception as e:  # persist the failure report, then surface it
        store.write_json(run_id, "error_report.json",
                         {"error": type(e).__name__, "message": str(e), "at": utc_now()})
        store.transition(record, "failed", error=f"{type(e).__name__}: {e}")
        raise


def run_pipeline(store: RunStore, config: RunConfig) -> RunRecord:
    """Create and synchronously execute a run."""
    record = create_run(store, config)
    try:
        return execute_run(store, record.run_id)
    except VidiError:
        return store.load_record(record.run_id)


def recluster(store: RunStore, run_id: str, k: int, seed: int) -> RunRecord:
    """Child run with new clustering over the parent's stored features."""
    parent = store.load_record(run_id)
    if parent.status != "complete":
        raise RunNotFound(f"run {run_id} is {parent.status}, not complete")
    child_cfg = dict(parent.config)
    child_cfg.update({"k": int(k), "k_range": None, "seed": int(seed), "recluster_of": run_id})
    child = store.create_run(child_cfg, parent_run=run_id)
    child = store.transition(child, "running")
    try:
        dataset = store.read_json(run_id, "dataset.json")
        store.write_json(child.run_id, "dataset.json", dataset)
        for rel in ("features.json",):
            store.write_json(child.run_id, rel, store.read_json(run_id, rel))
        store.write_bytes(child.run_id, "features.bin",
                          store.asset_path(run_id, "features.bin").read_bytes())
        parent_dir = store.run_dir(run_id)
        for sub in ("attr", "overlays"):
            src = parent_dir / sub
            for f in sorted(src.glob("*")):
                store.write_bytes(child.run_id, f"{sub}/{f.name}", f.read_bytes())

        features = load_features(store, child.run_id)
        model = fit(features, int(k), int(seed))
        _write_clusters(store, child.run_id, model)
        style = RunConfig.from_dict(child_cfg).overlay_style()
        _write_galleries(store, child.run_id, model, dataset, None, None, style)
        child.scenario = parent.scenario
        child.class_names = list(parent.class_names)
        child.n_images = parent.n_images
        child.chosen_k = model.k
        child.quality = _quality_payload(dataset, model)
        return store.transition(child, "complete")
    except Exception as e:
        store.write_json(child.run_id, "error_report.json",
                         {"error": type(e).__name__, "message": str(e), "at": utc_now()})
        store.transition(child, "failed", error=f"{type(e).__name__}: {e}")
        raise


def annotate(store: RunStore, run_id: str, cluster_id: int, verdict: str,
             assigned_label: str | None = None, author: str = "") -> dict:
    """Append a cluster-granular annotation; the log is append-only."""
    record = store.load_record(run_id)
    if record.status != "complete":
        raise ClusterNotFound(f"run {run_id} is {record.status}; no clusters to annotate")
    clusters = store.read_json(run_id, "clusters.json")
    if not 0 <= int(cluster_id) < int(clusters["k"]):
        raise ClusterNotFound(f"cluster {cluster_id} outside [0, {clusters['k']})")
    if verdict not in VERDICTS:
        raise InvalidLabel(f"verdict {verdict!r} not in {VERDICTS}")
    if verdict == "relabel":
        if not assigned_label:
            raise InvalidLabel("relabel requires assigned_label")
        if assigned_label not in record.class_names:
            raise InvalidLabel(
                f"assigned_label {assigned_label!r} not in {record.class_names}")
    elif assigned_label:
        raise InvalidLabel(f"assigned_label only valid with relabel, got {verdict!r}")
    entry = {"run_id": run_id, "cluster_id": int(cluster_id), "verdict": verdict,
             "assigned_label": assigned_label, "author": author, "timestamp": utc_now()}
    store.append_annotation(run_id, entry)
    return entry


def export_annotations(store: RunStore, run_id: str) -> str:
    """CSV of image_id -> effective label with its source.

    Cluster verdicts expand to members: relabel overrides the label, accept
    confirms the model's prediction (source expert), flag_impure keeps the
    prediction but marks the row flagged; untouched clusters stay source
    model.
    """
    record = store.load_record(run_id)
    if record.status != "complete":
        raise RunNotFound(f"run {run_id} is {record.status}, not complete")
    clusters = store.read_json(run_id, "clusters.json")
    dataset = store.read_json(run_id, "dataset.json")
    latest = store.latest_annotations(run_id)
    predicted = {e["image_id"]: e["predicted_class"] for e in dataset["images"]}
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["image_id", "label", "source"])
    for image_id in sorted(predicted):
        cid = int(clusters["assignments"][image_id])
        ann = latest.get(cid)
        if ann is None:
            label, source = predicted[image_id], "model"
        elif ann["verdict"] == "relabel":
            label, source = ann["assigned_label"], "expert"
        elif ann["verdict"] == "accept":
            label, source = predicted[image_id], "expert"
        else:  # flag_impure
            label, source = predicted[image_id], "flagged"
        writer.writerow([image_id, label, source])
    text = buf.getvalue()
    store.write_bytes(run_id, "annotations_export.csv", text.encode())
    return text
