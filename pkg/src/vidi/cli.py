"""Batch CLI: run the pipeline, sweep k, export annotations, serve the API.

    vidi run -c config.json [--data-dir DIR]
    vidi sweep -c config.json --k-min 2 --k-max 30 [--data-dir DIR]
    vidi export --run RUN_ID [--data-dir DIR] [-o FILE]
    vidi serve --port 8080 --data-dir DIR [--static DIR]

The config file holds a run configuration (see README); ``data_dir`` may be
set there or overridden on the command line.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import VidiError
from .pipeline import RunConfig, export_annotations, run_pipeline
from .store import RunStore


def _load_config(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _data_dir(args, cfg: dict | None = None) -> str:
    if getattr(args, "data_dir", None):
        return args.data_dir
    if cfg and cfg.get("data_dir"):
        return cfg["data_dir"]
    return "./vidi-data"


def _run(args) -> int:
    cfg = _load_config(args.config)
    store = RunStore(_data_dir(args, cfg))
    record = run_pipeline(store, RunConfig.from_dict(cfg))
    print(f"run {record.run_id}: {record.status}")
    if record.status == "complete":
        q = record.quality
        print(f"  k={q['k']}  homogeneity={q['homogeneity']:.4f}  "
              f"completeness={q['completeness']:.4f}  v={q['v_measure']:.4f}")
        print(f"  assets: {store.run_dir(record.run_id)}")
        return 0
    print(f"  error: {record.error}")
    return 1


def _sweep(args) -> int:
    cfg = _load_config(args.config)
    cfg["k"] = None
    cfg["k_range"] = [args.k_min, args.k_max]
    store = RunStore(_data_dir(args, cfg))
    record = run_pipeline(store, RunConfig.from_dict(cfg))
    print(f"run {record.run_id}: {record.status}")
    if record.status != "complete":
        print(f"  error: {record.error}")
        return 1
    sweep = store.read_json(record.run_id, "sweep.json")
    print(f"  chosen_k={sweep['chosen_k']}  ({sweep['policy']})")
    for e in sweep["entries"]:
        marker = " <- chosen" if e["k"] == sweep["chosen_k"] else ""
        print(f"  k={e['k']:3d}  h={e['homogeneity']:.4f}  c={e['completeness']:.4f}  "
              f"v={e['v_measure']:.4f}{marker}")
    return 0


def _export(args) -> int:
    store = RunStore(_data_dir(args))
    text = export_annotations(store, args.run)
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(text)
    return 0


def _serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(_data_dir(args), static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidi",
                                     description="attribution-space cluster explorer")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the full pipeline for a config")
    p_run.add_argument("-c", "--config", required=True)
    p_run.add_argument("--data-dir")
    p_run.set_defaults(func=_run)

    p_sweep = sub.add_parser("sweep", help="run with a k sweep and report the curve")
    p_sweep.add_argument("-c", "--config", required=True)
    p_sweep.add_argument("--k-min", type=int, required=True)
    p_sweep.add_argument("--k-max", type=int, required=True)
    p_sweep.add_argument("--data-dir")
    p_sweep.set_defaults(func=_sweep)

    p_export = sub.add_parser("export", help="export effective annotations as CSV")
    p_export.add_argument("--run", required=True)
    p_export.add_argument("--data-dir")
    p_export.add_argument("-o", "--output")
    p_export.set_defaults(func=_export)

    p_serve = sub.add_parser("serve", help="serve the explorer HTTP API")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--data-dir")
    p_serve.add_argument("--static", help="directory with the built explorer UI")
    p_serve.set_defaults(func=_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VidiError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
