"""Pipeline orchestration, run persistence, annotations, and the HTTP API."""

import json
import shutil

import numpy as np
import pytest
from fastapi.testclient import TestClient

from vidi.errors import ClusterNotFound, ConfigError, InvalidLabel, RunNotFound
from vidi.pipeline import (
    RunConfig,
    annotate,
    export_annotations,
    recluster,
    run_pipeline,
)
from vidi.server import create_app
from vidi.store import RunStore, new_ulid
from vidi.synthetic import make_demo_model, make_synthetic_dataset


@pytest.fixture(scope="module")
def fixture_paths(tmp_path_factory):
    """Small synthetic dataset + model shared by the service tests."""
    root = tmp_path_factory.mktemp("svc")
    manifest = make_synthetic_dataset(root / "data", n_images=12, seed=4, size=64)
    model_manifest, model_blob = make_demo_model(root / "model", size=64)
    return {"manifest": manifest, "model_manifest": model_manifest,
            "model_blob": model_blob}


def make_config(fixture_paths, **over):
    base = dict(fixture_paths)
    base.update({"k": 3, "seed": 11, "n_restarts": 2})
    base.update(over)
    return RunConfig.from_dict(base)


@pytest.fixture(scope="module")
def completed_run(fixture_paths, tmp_path_factory):
    store = RunStore(tmp_path_factory.mktemp("store"))
    record = run_pipeline(store, make_config(fixture_paths))
    assert record.status == "complete"
    return store, record


class TestRunPipeline:
    def test_complete_run_has_all_artifacts(self, completed_run):
        store, record = completed_run
        d = store.run_dir(record.run_id)
        for rel in ("run.json", "dataset.json", "features.bin", "features.json",
                    "clusters.json", "centroids.bin", "annotations.log"):
            assert (d / rel).exists(), rel
        clusters = json.loads((d / "clusters.json").read_text())
        assert clusters["k"] == 3
        assert len(clusters["assignments"]) == 12
        assert set(clusters) == {"k", "seed", "inertia", "centroid_blob_ref", "assignments"}
        galleries = sorted((d / "galleries").glob("*.json"))
        assert len(galleries) == 3
        overlays = list((d / "overlays").glob("*.png"))
        # 12 bases + 12 images x 3 classes x 2 polarities
        assert len(overlays) == 12 + 72
        attr = list((d / "attr").glob("*.bin"))
        assert len(attr) == 36

    def test_quality_on_separable_fixture(self, completed_run):
        _, record = completed_run
        assert record.quality["homogeneity"] >= 0.8
        assert record.n_images == 12
        assert record.scenario == "covid_severity"

    def test_rerun_same_config_reproduces_partition(self, completed_run, fixture_paths,
                                                    tmp_path):
        store1, record1 = completed_run
        store2 = RunStore(tmp_path / "again")
        record2 = run_pipeline(store2, make_config(fixture_paths))
        c1 = json.loads((store1.run_dir(record1.run_id) / "clusters.json").read_text())
        c2 = json.loads((store2.run_dir(record2.run_id) / "clusters.json").read_text())
        assert c1["assignments"] == c2["assignments"]
        assert c1["inertia"] == c2["inertia"]
        assert record1.quality == record2.quality

    def test_k_and_k_range_both_set_rejected(self, fixture_paths):
        with pytest.raises(ConfigError):
            make_config(fixture_paths, k_range=[2, 5]).validate()

    def test_neither_k_nor_range_rejected(self, fixture_paths):
        with pytest.raises(ConfigError):
            make_config(fixture_paths, k=None).validate()

    def test_empty_manifest_fails_with_report(self, fixture_paths, tmp_path):
        empty = tmp_path / "empty.json"
        empty.write_text(json.dumps({"scenario": "covid_severity", "records": []}))
        store = RunStore(tmp_path / "store")
        record = run_pipeline(store, make_config(fixture_paths, manifest=str(empty)))
        assert record.status == "failed"
        assert "EmptyInput" in record.error
        report = json.loads((store.run_dir(record.run_id) / "error_report.json").read_text())
        assert report["error"] == "EmptyInput"

    def test_sweep_run_writes_curve(self, fixture_paths, tmp_path):
        store = RunStore(tmp_path / "store")
        record = run_pipeline(store, make_config(fixture_paths, k=None, k_range=[2, 6]))
        assert record.status == "complete"
        assert record.has_sweep
        sweep = store.read_json(record.run_id, "sweep.json")
        assert [e["k"] for e in sweep["entries"]] == [2, 3, 4, 5, 6]
        assert record.chosen_k == sweep["chosen_k"]
        csv_lines = store.asset_path(record.run_id, "sweep.csv").read_text().splitlines()
        assert csv_lines[0] == "k,homogeneity,completeness,v_measure,inertia,seed"
        assert len(csv_lines) == 6

    def test_run_dir_is_self_contained(self, completed_run, tmp_path):
        store, record = completed_run
        moved_root = tmp_path / "moved"
        moved = moved_root / "runs" / record.run_id
        moved.parent.mkdir(parents=True)
        shutil.copytree(store.run_dir(record.run_id), moved)
        fresh = RunStore(moved_root)
        # read-only serving of the copied run works without the original data
        rec = fresh.load_record(record.run_id)
        assert rec.quality == record.quality
        clusters = fresh.read_json(record.run_id, "clusters.json")
        gallery = fresh.read_json(record.run_id, "galleries/0.json")
        for row in gallery["rows"]:
            assert fresh.asset_path(record.run_id, row["base"]).exists()


class TestRecluster:
    def test_identical_k_seed_reproduces_partition(self, completed_run):
        store, record = completed_run
        clusters = store.read_json(record.run_id, "clusters.json")
        child = recluster(store, record.run_id, clusters["k"], clusters["seed"])
        assert child.status == "complete"
        assert child.parent_run == record.run_id
        child_clusters = store.read_json(child.run_id, "clusters.json")
        assert child_clusters["assignments"] == clusters["assignments"]
        assert child.quality == record.quality

    def test_k1_single_cluster_zero_homogeneity(self, completed_run):
        store, record = completed_run
        child = recluster(store, record.run_id, 1, 0)
        assert child.quality["k"] == 1
        assert child.quality["homogeneity"] == 0.0

    def test_attribution_not_recomputed_but_copied(self, completed_run):
        store, record = completed_run
        child = recluster(store, record.run_id, 2, 5)
        parent_attr = sorted(f.name for f in (store.run_dir(record.run_id) / "attr").glob("*"))
        child_attr = sorted(f.name for f in (store.run_dir(child.run_id) / "attr").glob("*"))
        assert parent_attr == child_attr
        name = next(n for n in parent_attr if n.endswith(".bin"))
        assert (store.run_dir(record.run_id) / "attr" / name).read_bytes() == \
            (store.run_dir(child.run_id) / "attr" / name).read_bytes()

    def test_sweep_chosen_k_matches_sweep_row(self, fixture_paths, tmp_path):
        store = RunStore(tmp_path / "store")
        record = run_pipeline(store, make_config(fixture_paths, k=None, k_range=[2, 6]))
        sweep = store.read_json(record.run_id, "sweep.json")
        entry = next(e for e in sweep["entries"] if e["k"] == sweep["chosen_k"])
        child = recluster(store, record.run_id, entry["k"], entry["seed"])
        assert child.quality["homogeneity"] == pytest.approx(entry["homogeneity"], abs=1e-12)
        assert child.quality["completeness"] == pytest.approx(entry["completeness"], abs=1e-12)
        assert child.quality["v_measure"] == pytest.approx(entry["v_measure"], abs=1e-12)

    def test_missing_run_rejected(self, completed_run):
        store, _ = completed_run
        with pytest.raises(RunNotFound):
            recluster(store, new_ulid(), 2, 0)


class TestAnnotations:
    def test_accept_round_trip(self, completed_run):
        store, record = completed_run
        annotate(store, record.run_id, 0, "accept", author="dr-a")
        view = store.latest_annotations(record.run_id)
        assert view[0]["verdict"] == "accept"

    def test_relabel_requires_label(self, completed_run):
        store, record = completed_run
        with pytest.raises(InvalidLabel):
            annotate(store, record.run_id, 0, "relabel")

    def test_relabel_label_must_be_in_class_set(self, completed_run):
        store, record = completed_run
        with pytest.raises(InvalidLabel):
            annotate(store, record.run_id, 0, "relabel", assigned_label="bogus")

    def test_log_is_append_only_latest_wins(self, completed_run):
        store, record = completed_run
        annotate(store, record.run_id, 1, "flag_impure", author="dr-a")
        annotate(store, record.run_id, 1, "relabel", assigned_label="severe", author="dr-b")
        log = [a for a in store.read_annotations(record.run_id) if a["cluster_id"] == 1]
        assert len(log) == 2
        assert store.latest_annotations(record.run_id)[1]["verdict"] == "relabel"

    def test_unknown_cluster_rejected(self, completed_run):
        store, record = completed_run
        with pytest.raises(ClusterNotFound):
            annotate(store, record.run_id, 99, "accept")


class TestExport:
    @pytest.fixture
    def fresh_run(self, fixture_paths, tmp_path):
        store = RunStore(tmp_path / "store")
        record = run_pipeline(store, make_config(fixture_paths))
        return store, record

    def test_no_annotations_all_model(self, fresh_run):
        store, record = fresh_run
        rows = export_annotations(store, record.run_id).strip().splitlines()
        assert rows[0] == "image_id,label,source"
        assert len(rows) == 1 + 12
        assert all(r.endswith(",model") for r in rows[1:])

    def test_relabel_expands_to_members(self, fresh_run):
        store, record = fresh_run
        annotate(store, record.run_id, 0, "relabel", assigned_label="severe")
        clusters = store.read_json(record.run_id, "clusters.json")
        members = {i for i, c in clusters["assignments"].items() if c == 0}
        rows = export_annotations(store, record.run_id).strip().splitlines()[1:]
        for row in rows:
            image_id, label, source = row.split(",")
            if image_id in members:
                assert (label, source) == ("severe", "expert")
            else:
                assert source == "model"

    def test_mixed_verdicts_membership_oracle(self, fresh_run):
        store, record = fresh_run
        annotate(store, record.run_id, 0, "accept")
        annotate(store, record.run_id, 1, "relabel", assigned_label="mild")
        annotate(store, record.run_id, 2, "flag_impure")
        clusters = store.read_json(record.run_id, "clusters.json")
        dataset = store.read_json(record.run_id, "dataset.json")
        predicted = {e["image_id"]: e["predicted_class"] for e in dataset["images"]}
        rows = export_annotations(store, record.run_id).strip().splitlines()[1:]
        assert len(rows) == len(dataset["images"])
        for row in rows:
            image_id, label, source = row.split(",")
            cid = clusters["assignments"][image_id]
            if cid == 0:
                assert (label, source) == (predicted[image_id], "expert")
            elif cid == 1:
                assert (label, source) == ("mild", "expert")
            else:
                assert (label, source) == (predicted[image_id], "flagged")


class TestHTTPAPI:
    @pytest.fixture(scope="class")
    def client(self, fixture_paths, tmp_path_factory):
        app = create_app(tmp_path_factory.mktemp("api"))
        with TestClient(app) as c:
            c.fixture_paths = fixture_paths
            yield c

    @pytest.fixture(scope="class")
    def run_id(self, client):
        body = dict(client.fixture_paths)
        body.update({"k": 3, "seed": 11, "n_restarts": 2})
        resp = client.post("/api/runs?sync=1", json=body)
        assert resp.status_code == 201
        record = resp.json()
        assert record["status"] == "complete"
        return record["run_id"]

    def test_list_runs(self, client, run_id):
        runs = client.get("/api/runs").json()
        assert any(r["run_id"] == run_id for r in runs)

    def test_get_run(self, client, run_id):
        record = client.get(f"/api/runs/{run_id}").json()
        assert record["status"] == "complete"
        assert record["quality"]["k"] == 3

    def test_unknown_run_404(self, client):
        assert client.get(f"/api/runs/{new_ulid()}").status_code == 404

    def test_clusters_listing(self, client, run_id):
        cards = client.get(f"/api/runs/{run_id}/clusters").json()
        assert len(cards) == 3
        assert {c["cluster_id"] for c in cards} == {0, 1, 2}
        assert all(0.0 <= c["purity"] <= 1.0 for c in cards)

    def test_cluster_detail_and_assets(self, client, run_id):
        detail = client.get(f"/api/runs/{run_id}/clusters/0").json()
        assert detail["cluster_id"] == 0
        assert detail["quality"]["k"] == 3
        rows = detail["gallery"]["rows"]
        assert len(rows) == len(detail["members"])
        ref = rows[0]["base"]
        resp = client.get(f"/api/assets/{run_id}/{ref}")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"
        fav = rows[0]["overlays"][detail["members"][0]["predicted_class"]]["fav"]
        assert client.get(f"/api/assets/{run_id}/{fav}").status_code == 200

    def test_asset_traversal_blocked(self, client, run_id):
        resp = client.get(f"/api/assets/{run_id}/../../index.json")
        assert resp.status_code in (400, 404, 500)
        assert resp.status_code != 200

    def test_recluster_endpoint(self, client, run_id):
        resp = client.post(f"/api/runs/{run_id}/recluster", json={"k": 2, "seed": 1})
        assert resp.status_code == 201
        child = resp.json()
        assert child["parent_run"] == run_id
        assert child["status"] == "complete"
        polled = client.get(f"/api/runs/{child['run_id']}").json()
        assert polled["quality"]["k"] == 2

    def test_recluster_k_too_large_400(self, client, run_id):
        resp = client.post(f"/api/runs/{run_id}/recluster", json={"k": 999, "seed": 0})
        assert resp.status_code == 400

    def test_annotation_round_trip(self, client, run_id):
        resp = client.post(f"/api/runs/{run_id}/clusters/1/annotations",
                           json={"verdict": "relabel", "assigned_label": "severe",
                                 "author": "dr-x"})
        assert resp.status_code == 201
        cards = client.get(f"/api/runs/{run_id}/clusters").json()
        card = next(c for c in cards if c["cluster_id"] == 1)
        assert card["verdict"] == "relabel"
        assert card["assigned_label"] == "severe"
        detail = client.get(f"/api/runs/{run_id}/clusters/1").json()
        assert detail["annotation"]["author"] == "dr-x"

    def test_invalid_annotation_400(self, client, run_id):
        resp = client.post(f"/api/runs/{run_id}/clusters/1/annotations",
                           json={"verdict": "relabel"})
        assert resp.status_code == 400

    def test_export_endpoint(self, client, run_id):
        resp = client.get(f"/api/runs/{run_id}/annotations/export")
        assert resp.status_code == 200
        lines = resp.text.strip().splitlines()
        assert lines[0] == "image_id,label,source"
        assert len(lines) == 13

    def test_sweep_endpoint(self, client, run_id):
        body = dict(client.fixture_paths)
        body.update({"k_range": [2, 4], "seed": 3})
        resp = client.post("/api/runs?sync=1", json=body)
        sweep_run = resp.json()["run_id"]
        sweep = client.get(f"/api/runs/{sweep_run}/sweep").json()
        assert [e["k"] for e in sweep["entries"]] == [2, 3, 4]
        assert sweep["chosen_k"] in (2, 3, 4)

    def test_async_run_polls_to_complete(self, client):
        import time
        body = dict(client.fixture_paths)
        body.update({"k": 2, "seed": 0, "n_restarts": 1})
        resp = client.post("/api/runs", json=body)
        assert resp.status_code == 201
        run_id = resp.json()["run_id"]
        assert resp.json()["status"] == "pending"
        for _ in range(200):
            status = client.get(f"/api/runs/{run_id}").json()["status"]
            if status in ("complete", "failed"):
                break
            time.sleep(0.1)
        assert status == "complete"


class TestCLI:
    def test_run_sweep_export(self, fixture_paths, tmp_path, capsys):
        from vidi.cli import main
        cfg = dict(fixture_paths)
        cfg.update({"k": 3, "seed": 11, "n_restarts": 2, "data_dir": str(tmp_path / "d")})
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["run", "-c", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "complete" in out
        run_id = out.split()[1].rstrip(":")

        assert main(["export", "--run", run_id, "--data-dir", str(tmp_path / "d"),
                     "-o", str(tmp_path / "ann.csv")]) == 0
        lines = (tmp_path / "ann.csv").read_text().strip().splitlines()
        assert len(lines) == 13

        sweep_cfg = dict(cfg)
        sweep_cfg.pop("k")
        cfg_path.write_text(json.dumps(sweep_cfg))
        assert main(["sweep", "-c", str(cfg_path), "--k-min", "2", "--k-max", "4"]) == 0
        out = capsys.readouterr().out
        assert "chosen_k=" in out

    def test_unknown_run_exits_nonzero(self, tmp_path, capsys):
        from vidi.cli import main
        assert main(["export", "--run", "NOPE", "--data-dir", str(tmp_path)]) == 2
