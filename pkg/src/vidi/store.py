"""Directory-per-run persistence with an append-only annotation log.

Layout under the data directory::

    index.json                     # run_id -> status/created summary
    runs/<run_id>/
      run.json                     # config snapshot, status, quality, refs
      dataset.json                 # manifest snapshot + per-image predictions
      features.bin / features.json # embedded vectors (little-endian float32)
      clusters.json / centroids.bin
      sweep.csv / sweep.json       # present for k-range runs
      attr/                        # per image+class contribution blobs
      overlays/                    # rendered PNGs
      galleries/                   # per-cluster gallery manifests
      annotations.log              # JSONL, append-only

A run directory is self-contained: serving it read-only needs nothing else.
Run ids are 26-character Crockford-base32 ULIDs (sortable by creation time).
Status moves pending -> running -> complete | failed, never backwards.
"""

from __future__ import annotations

import json
import secrets
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import RunNotFound, VidiError

_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
_TRANSITIONS = {"pending": {"running"}, "running": {"complete", "failed"},
                "complete": set(), "failed": set()}

VERDICTS = ("accept", "relabel", "flag_impure")


def new_ulid() -> str:
    ts = int(time.time() * 1000) & ((1 << 48) - 1)
    value = (ts << 80) | secrets.randbits(80)
    return "".join(_CROCKFORD[(value >> (5 * i)) & 31] for i in range(25, -1, -1))


def utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunRecord:
    run_id: str
    status: str
    config: dict
    created_at: str
    completed_at: str | None = None
    parent_run: str | None = None
    scenario: str | None = None
    class_names: list = field(default_factory=list)
    n_images: int = 0
    quality: dict | None = None       # homogeneity / completeness / v_measure
    chosen_k: int | None = None
    has_sweep: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunRecord":
        return RunRecord(**d)


class RunStore:
    """Filesystem-backed run registry. One writer per run, many readers."""

    def __init__(self, data_dir):
        self.root = Path(data_dir)
        self.runs_root = self.root / "runs"
        self.runs_root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        if not self.index_path.exists():
            self.index_path.write_text("{}")

    def run_dir(self, run_id: str) -> Path:
        return self.runs_root / run_id

    def _index(self) -> dict:
        return json.loads(self.index_path.read_text())

    def _write_index(self, index: dict) -> None:
        self.index_path.write_text(json.dumps(index, indent=2, sort_keys=True))

    def list_runs(self) -> list[dict]:
        index = self._index()
        return [index[k] | {"run_id": k} for k in sorted(index)]

    def create_run(self, config: dict, parent_run: str | None = None) -> RunRecord:
        record = RunRecord(run_id=new_ulid(), status="pending", config=config,
                           created_at=utc_now(), parent_run=parent_run)
        d = self.run_dir(record.run_id)
        d.mkdir(parents=True)
        (d / "annotations.log").touch()
        self.save_record(record)
        return record

    def save_record(self, record: RunRecord) -> None:
        path = self.run_dir(record.run_id) / "run.json"
        path.write_text(json.dumps(record.to_dict(), indent=2))
        index = self._index()
        index[record.run_id] = {"status": record.status, "created_at": record.created_at,
                                "scenario": record.scenario, "parent_run": record.parent_run}
        self._write_index(index)

    def load_record(self, run_id: str) -> RunRecord:
        path = self.run_dir(run_id) / "run.json"
        if not path.exists():
            raise RunNotFound(f"no run {run_id!r}")
        return RunRecord.from_dict(json.loads(path.read_text()))

    def transition(self, record: RunRecord, status: str, error: str | None = None) -> RunRecord:
        if status not in _TRANSITIONS.get(record.status, set()):
            raise VidiError(f"illegal status transition {record.status} -> {status}")
        record.status = status
        if status in ("complete", "failed"):
            record.completed_at = utc_now()
        record.error = error
        self.save_record(record)
        return record

    # --- run-dir file helpers ---

    def write_json(self, run_id: str, rel: str, payload) -> None:
        path = self.run_dir(run_id) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2))

    def read_json(self, run_id: str, rel: str):
        path = self.asset_path(run_id, rel)
        if not path.exists():
            raise RunNotFound(f"run {run_id}: missing {rel}")
        return json.loads(path.read_text())

    def write_bytes(self, run_id: str, rel: str, payload: bytes) -> None:
        path = self.run_dir(run_id) / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)

    def asset_path(self, run_id: str, rel: str) -> Path:
        base = self.run_dir(run_id).resolve()
        path = (base / rel).resolve()
        if base not in path.parents and path != base:
            raise VidiError(f"asset path {rel!r} escapes the run directory")
        return path

    # --- annotations ---

    def append_annotation(self, run_id: str, record: dict) -> None:
        path = self.run_dir(run_id) / "annotations.log"
        with path.open("a") as f:
            f.write(json.dumps(record) + "\n")

    def read_annotations(self, run_id: str) -> list[dict]:
        path = self.run_dir(run_id) / "annotations.log"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def latest_annotations(self, run_id: str) -> dict[int, dict]:
        """Latest-wins view: cluster_id -> most recent annotation record."""
        view: dict[int, dict] = {}
        for rec in self.read_annotations(run_id):
            view[int(rec["cluster_id"])] = rec
        return view
