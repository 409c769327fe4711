"""HTTP API for the cluster explorer: run management, assets, annotations.

All state lives in the run store; GETs never mutate. Pipeline execution
happens on a background thread with status polling (POST /api/runs accepts
``?sync=1`` for callers that want to block, e.g. tests). Reclustering reuses
cached features and completes inline.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .errors import (
    ClusterNotFound,
    ConfigError,
    InvalidLabel,
    KTooLarge,
    RunNotFound,
    VidiError,
)
from .pipeline import (
    RunConfig,
    annotate,
    create_run,
    execute_run,
    export_annotations,
    recluster,
)
from .store import RunStore

MEDIA_TYPES = {".png": "image/png", ".csv": "text/csv",
               ".json": "application/json", ".bin": "application/octet-stream"}


class RunConfigBody(BaseModel):
    manifest: str
    model_manifest: str
    model_blob: str
    k: int | None = None
    k_range: list[int] | None = None
    seed: int = 0
    n_restarts: int = 5
    baselines: dict = {"kind": "zeros"}
    embedding: dict = {}
    overlay: dict = {}


class ReclusterBody(BaseModel):
    k: int
    seed: int = 0


class AnnotationBody(BaseModel):
    verdict: str
    assigned_label: str | None = None
    author: str = ""


def _cluster_cards(store: RunStore, run_id: str) -> list[dict]:
    record = store.load_record(run_id)
    if record.status != "complete":
        return []
    clusters = store.read_json(run_id, "clusters.json")
    latest = store.latest_annotations(run_id)
    cards = []
    for cid in range(int(clusters["k"])):
        manifest = store.read_json(run_id, f"galleries/{cid}.json")
        ann = latest.get(cid)
        cards.append({"cluster_id": cid, "size": manifest["size"],
                      "purity": manifest["purity"],
                      "majority_label": manifest["majority_label"],
                      "verdict": ann["verdict"] if ann else None,
                      "assigned_label": ann["assigned_label"] if ann else None})
    return cards


def create_app(data_dir, static_dir=None) -> FastAPI:
    store = RunStore(data_dir)
    app = FastAPI(title="vidi explorer API")

    @app.exception_handler(VidiError)
    async def vidi_error_handler(request: Request, exc: VidiError):
        status = 404 if isinstance(exc, (RunNotFound, ClusterNotFound)) else \
            400 if isinstance(exc, (ConfigError, InvalidLabel, KTooLarge)) else 500
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__, "message": str(exc)})

    @app.get("/api/runs")
    def list_runs():
        return store.list_runs()

    @app.post("/api/runs", status_code=201)
    def post_run(body: RunConfigBody, sync: bool = Query(default=False)):
        config = RunConfig.from_dict(body.model_dump())
        record = create_run(store, config)
        if sync:
            try:
                execute_run(store, record.run_id)
            except VidiError:
                pass  # failure is recorded on the run
            return store.load_record(record.run_id).to_dict()
        thread = threading.Thread(target=_execute_quietly, args=(store, record.run_id),
                                  daemon=True)
        thread.start()
        return record.to_dict()

    @app.get("/api/runs/{run_id}")
    def get_run(run_id: str):
        return store.load_record(run_id).to_dict()

    @app.get("/api/runs/{run_id}/sweep")
    def get_sweep(run_id: str):
        store.load_record(run_id)
        return store.read_json(run_id, "sweep.json")

    @app.get("/api/runs/{run_id}/clusters")
    def get_clusters(run_id: str):
        return _cluster_cards(store, run_id)

    @app.get("/api/runs/{run_id}/clusters/{cluster_id}")
    def get_cluster(run_id: str, cluster_id: int):
        record = store.load_record(run_id)
        if record.status != "complete":
            raise ClusterNotFound(f"run {run_id} is {record.status}")
        clusters = store.read_json(run_id, "clusters.json")
        if not 0 <= cluster_id < int(clusters["k"]):
            raise ClusterNotFound(f"cluster {cluster_id} outside [0, {clusters['k']})")
        manifest = store.read_json(run_id, f"galleries/{cluster_id}.json")
        dataset = store.read_json(run_id, "dataset.json")
        by_image = {e["image_id"]: e for e in dataset["images"]}
        members = [{"image_id": r["image_id"],
                    "label": by_image[r["image_id"]]["label"],
                    "predicted_class": r["predicted_class"],
                    "severity_bin": r["severity_bin"]} for r in manifest["rows"]]
        ann = store.latest_annotations(run_id).get(cluster_id)
        return {"cluster_id": cluster_id, "members": members,
                "quality": record.quality, "gallery": manifest, "annotation": ann}

    @app.post("/api/runs/{run_id}/recluster", status_code=201)
    def post_recluster(run_id: str, body: ReclusterBody):
        child = recluster(store, run_id, body.k, body.seed)
        return child.to_dict()

    @app.post("/api/runs/{run_id}/clusters/{cluster_id}/annotations", status_code=201)
    def post_annotation(run_id: str, cluster_id: int, body: AnnotationBody):
        return annotate(store, run_id, cluster_id, body.verdict,
                        body.assigned_label, body.author)

    @app.get("/api/runs/{run_id}/annotations/export")
    def get_export(run_id: str):
        return PlainTextResponse(export_annotations(store, run_id), media_type="text/csv")

    @app.get("/api/assets/{run_id}/{rel_path:path}")
    def get_asset(run_id: str, rel_path: str):
        store.load_record(run_id)
        path = store.asset_path(run_id, rel_path)
        if not path.is_file():
            raise RunNotFound(f"no asset {rel_path!r} in run {run_id}")
        return Response(content=path.read_bytes(),
                        media_type=MEDIA_TYPES.get(path.suffix, "application/octet-stream"))

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app


def _execute_quietly(store: RunStore, run_id: str) -> None:
    try:
        execute_run(store, run_id)
    except Exception:
        pass  # recorded on the run as status=failed + error report
