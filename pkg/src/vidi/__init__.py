"""Attribution-space clustering toolkit for chest X-ray triage.

Pipeline: a small CNN scores radiographs, difference-from-reference
attribution explains each prediction, images are clustered by explanation
similarity, cluster quality is scored by entropy metrics, and an annotation
service lets an expert review whole clusters at once.
"""

from .attribution import (
    AttributionMap,
    Baseline,
    SaliencyPair,
    attribute_all_classes,
    deeplift,
    deepshap,
    split_saliency,
)
from .clustering import (
    ClusterModel,
    EmbeddingConfig,
    FeatureVector,
    assign,
    embed,
    fit,
    fit_best,
    seed_kmeanspp,
)
from .datapipe import (
    ImageRecord,
    PreprocessConfig,
    Scenario,
    augment,
    load_manifest,
    preprocess,
    severity_bin,
    stratified_split,
)
from .metrics import (
    ClusterQuality,
    KSweepResult,
    classification_report,
    cluster_quality,
    completeness,
    contingency,
    homogeneity,
    k_sweep,
    v_measure,
)
from .nn import ActivationTrace, LayerSpec, Network, forward, load_network, predict, save_network
from .pipeline import RunConfig, annotate, execute_run, export_annotations, recluster, run_pipeline
from .render import GalleryPage, OverlayStyle, render_gallery, render_overlay
from .store import RunRecord, RunStore

__version__ = "0.1.0"

__all__ = [
    "ActivationTrace", "AttributionMap", "Baseline", "ClusterModel", "ClusterQuality",
    "EmbeddingConfig", "FeatureVector", "GalleryPage", "ImageRecord", "KSweepResult",
    "LayerSpec", "Network", "OverlayStyle", "PreprocessConfig", "RunConfig", "RunRecord",
    "RunStore", "SaliencyPair", "Scenario", "annotate", "assign", "attribute_all_classes",
    "augment", "classification_report", "cluster_quality", "completeness", "contingency",
    "deeplift", "deepshap", "embed", "execute_run", "export_annotations", "fit", "fit_best",
    "forward", "homogeneity", "k_sweep", "load_manifest", "load_network", "predict",
    "preprocess", "recluster", "render_gallery", "render_overlay", "run_pipeline",
    "save_network", "seed_kmeanspp", "severity_bin", "split_saliency", "stratified_split",
    "v_measure",
]
