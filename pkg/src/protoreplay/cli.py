"""Command-line entry point and run-directory layout.

Run directory::

    config.yaml            resolved config snapshot (re-running it reproduces the metrics)
    manifest.json          run id, hashes, timestamps, per-task status, artifact list
    embeddings.txt         the label-embedding table the run used
    train_log.csv          task, step, l_dm, l_de, total
    accuracy_matrix.csv    row i = after task i (persisted after every task)
    metrics.json           A_1..A_T, F_1..F_T, Frechet trend; no timestamps
    checkpoints/task_t.pt
    replay/task_t/

The run root comes from ``$PROTOREPLAY_RUNS`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import re
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .config import ExperimentConfig, apply_overrides, config_from_dict, load_raw, resolve_key
from .data import build_stream, content_hash
from .errors import ConfigError, StageError
from .eval import MetricsReport, render_table
from .io import save_checkpoint, save_replay

log = logging.getLogger("protoreplay")

RUNS_ENV = "PROTOREPLAY_RUNS"
LOSS_COLUMNS = ("task", "step", "l_dm", "l_de", "total")


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def run_id(cfg: ExperimentConfig) -> str:
    return f"{cfg.method}-{cfg.data.name}-seed{cfg.seed}-{cfg.hash()[:10]}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hash(path) -> str:
    return content_hash(Path(path).read_bytes())


class RunWriter:
    """Persists a run as it progresses; receives ``task_done`` from the experiment loop."""

    def __init__(self, run_dir: Path, cfg: ExperimentConfig, stream, table):
        self.dir = Path(run_dir)
        self.cfg = cfg
        self.label_sets = [list(ls) for ls in stream.label_sets]
        self.clip = list(stream.value_range) if stream.value_range and cfg.sampler.clip_to_data_range else None
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(self.dir / "config.yaml")
        table.save(self.dir / "embeddings.txt")
        with open(self.dir / "train_log.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(LOSS_COLUMNS)
        self._logged = 0
        self.manifest = {
            "run_id": run_id(cfg),
            "run_dir": self.dir.name,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "inputs": {
                "dataset_spec": content_hash({"data": cfg.to_dict()["data"], "seed": cfg.seed}),
                "embedding_table": _file_hash(self.dir / "embeddings.txt"),
            },
            "timestamps": {"started": _now()},
            "tasks": {str(t): "pending" for t in range(1, stream.T + 1)},
            "status": "running",
            "artifacts": {},
        }
        self._save_manifest()

    def _save_manifest(self):
        self.manifest["artifacts"] = {
            str(p.relative_to(self.dir)): _file_hash(p)
            for p in sorted(self.dir.rglob("*")) if p.is_file() and p != self.dir / "manifest.json"}
        _write_json(self.dir / "manifest.json", self.manifest)

    def task_done(self, t, art, classifier, denoiser, prototypes):
        art.matrix.save(self.dir / "accuracy_matrix.csv")
        with open(self.dir / "train_log.csv", "a", newline="") as fh:
            w = csv.writer(fh)
            for row in art.loss_rows[self._logged:]:
                w.writerow([row[0], row[1], *(repr(v) for v in row[2:])])
        self._logged = len(art.loss_rows)
        if t in art.replay:
            save_replay(self.dir / "replay" / f"task_{t}", art.replay[t])
        ok = art.matrix.row_complete(t)
        if ok and self.cfg.save_checkpoints and self.cfg.method != "finetuning":
            (self.dir / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(self.dir / "checkpoints" / f"task_{t}.pt", denoiser, art.schedule,
                            prototypes, classifier,
                            extra={"task": t, "table": str((self.dir / "embeddings.txt").resolve()),
                                   "classes": sorted({int(c) for ls in self.label_sets[:t] for c in ls}),
                                   "clip_x0": self.clip})
        self.manifest["tasks"][str(t)] = "complete" if ok else "failed"
        self.manifest["timestamps"][f"task_{t}"] = _now()
        self._save_manifest()

    def finish(self, report: MetricsReport, frechet_trend, error: StageError | None = None):
        metrics = {
            "run_id": run_id(self.cfg),
            "method": self.cfg.method,
            "scenario": self.cfg.data.scenario,
            "dataset": self.cfg.data.name,
            "T": len(self.manifest["tasks"]),
            "A": report.A,
            "F": report.F,
            "frechet_trend": frechet_trend,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
        }
        if error is None:
            _write_json(self.dir / "metrics.json", metrics)
            self.manifest["status"] = "complete"
        else:
            self.manifest["status"] = "failed"
            self.manifest["failure"] = {"task": error.task, "stage": error.stage, "error": repr(error.cause)}
        self.manifest["timestamps"]["finished"] = _now()
        self._save_manifest()


def execute(cfg: ExperimentConfig, run_dir: Path) -> Path:
    """Run one experiment into ``run_dir``; raises StageError after persisting partial results."""
    from .continual import make_table, run_experiment

    stream = build_stream(cfg.to_dict()["data"], cfg.seed)
    table = make_table(cfg, stream)
    writer = RunWriter(run_dir, cfg, stream, table)
    try:
        matrix, art = run_experiment(cfg, stream, table, writer=writer)
    except StageError as err:
        from .eval import AccuracyMatrix
        partial = AccuracyMatrix.load(run_dir / "accuracy_matrix.csv")
        writer.finish(MetricsReport.from_matrix(partial), None, error=err)
        raise
    writer.finish(MetricsReport.from_matrix(matrix), art.frechet_trend)
    return run_dir


def _prepare_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{path} exists; pass --overwrite or choose --out")
        shutil.rmtree(path)
    return path


def _print_config_errors(err: ConfigError):
    print("invalid config:", file=sys.stderr)
    for e in err.errors:
        print(f"  - {e}", file=sys.stderr)


def _load(args):
    raw = apply_overrides(load_raw(args.config), args.override)
    return config_from_dict(raw, base_dir=Path(args.config).parent)


def cmd_validate(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as err:
        _print_config_errors(err)
        return 2
    print(f"ok: {run_id(cfg)}")
    return 0


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as err:
        _print_config_errors(err)
        return 2
    run_dir = Path(args.out) if args.out else runs_root() / run_id(cfg)
    try:
        _prepare_dir(run_dir, args.overwrite)
    except FileExistsError as err:
        print(err, file=sys.stderr)
        return 2
    try:
        execute(cfg, run_dir)
    except StageError as err:
        print(f"run failed at {err}; partial results in {run_dir}", file=sys.stderr)
        return 1
    print(run_dir)
    return 0


def parse_grid(items) -> list[tuple[str, list]]:
    """``key=v1,v2,...`` strings to (dotted key, values); YAML scalars, raw strings kept for labels."""
    grid = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not of the form key=v1,v2")
        key, values = item.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid entry {item!r} has no values")
        grid.append((resolve_key(key.strip()), vals))
    if not grid:
        raise ConfigError("empty grid: give at least one --grid key=v1,v2")
    return grid


def _cell_name(index, assignment):
    label = ",".join(f"{k.split('.')[-1]}={v}" for k, v in assignment)
    return f"cell{index:02d}-" + re.sub(r"[^A-Za-z0-9_.=,+-]", "_", label)


def _run_cell(cfg_dict, run_dir):
    cfg = config_from_dict(cfg_dict)
    try:
        execute(cfg, Path(run_dir))
        return None
    except StageError as err:
        return {"task": err.task, "stage": err.stage, "error": repr(err.cause)}
    except Exception as err:  # a broken cell must not stop the sweep
        return {"task": None, "stage": "setup", "error": repr(err)}


def cmd_sweep(args) -> int:
    try:
        grid = parse_grid(args.grid)
        base = apply_overrides(load_raw(args.config), args.override)
        cells = []
        for combo in itertools.product(*[vals for _, vals in grid]):
            assignment = list(zip([k for k, _ in grid], combo))
            cfg = config_from_dict(apply_overrides(base, [f"{k}={v}" for k, v in assignment]),
                                   base_dir=Path(args.config).parent)
            cells.append((assignment, cfg))
    except ConfigError as err:
        _print_config_errors(err)
        return 2
    sweep_dir = Path(args.out) if args.out else runs_root() / (
        "sweep-" + content_hash([c.hash() for _, c in cells])[:10])
    try:
        _prepare_dir(sweep_dir, args.overwrite)
    except FileExistsError as err:
        print(err, file=sys.stderr)
        return 2
    sweep_dir.mkdir(parents=True, exist_ok=True)
    dirs = [sweep_dir / _cell_name(i, a) for i, (a, _) in enumerate(cells, start=1)]
    jobs = [(c.to_dict(), str(d)) for (_, c), d in zip(cells, dirs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            failures = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        failures = [_run_cell(*j) for j in jobs]

    rows, summary = [], []
    for (assignment, cfg), d, fail in zip(cells, dirs, failures):
        label = " ".join(f"{k.split('.')[-1]}={v}" for k, v in assignment)
        entry = {"cell": d.name, "overrides": {k: v for k, v in assignment}, "status": "complete"}
        if fail is None:
            m = json.loads((d / "metrics.json").read_text())
            rows.append({"label": label, "A_T": m["A"][-1], "F_T": m["F"][-1]})
            entry.update(A_T=m["A"][-1], F_T=m["F"][-1])
        else:
            log.error("sweep cell %s failed: %s", d.name, fail)
            rows.append({"label": label + " [FAILED]", "A_T": None, "F_T": None})
            entry.update(status="failed", failure=fail)
        summary.append(entry)
    _write_json(sweep_dir / "sweep.json", {"grid": [[k, v] for k, v in grid], "cells": summary})
    table = render_table(rows, title="Sweep: final average accuracy / forgetting (%)")
    (sweep_dir / "comparison.txt").write_text(table)
    print(table, end="")
    return 1 if any(failures) else 0


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def collect_runs(paths) -> list[Path]:
    """Run directories holding a metrics summary; sweep directories expand to their cells."""
    found = []
    for p in map(Path, paths):
        if (p / "metrics.json").is_file():
            found.append(p)
            continue
        children = sorted(c for c in p.glob("*/metrics.json")) if p.is_dir() else []
        if children:
            found.extend(c.parent for c in children)
        else:
            log.warning("%s: no metrics summary, skipped", p)
    return found


def group_runs(run_dirs) -> list[dict]:
    """Group runs that differ only in seed; labels name the method plus any distinguishing keys."""
    groups = {}
    for d in run_dirs:
        metrics = json.loads((d / "metrics.json").read_text())
        cfg_path = d / "config.yaml"
        flat = _flatten(yaml.safe_load(cfg_path.read_text())) if cfg_path.is_file() else {}
        flat.pop("seed", None)
        flat.pop("embeddings.path", None)
        flat["method"] = metrics["method"]
        key = content_hash(flat)
        groups.setdefault(key, {"config": flat, "runs": []})["runs"].append(metrics)
    varying = set()
    configs = [g["config"] for g in groups.values()]
    for k in sorted({k for c in configs for k in c}):
        if len({json.dumps(c.get(k), sort_keys=True) for c in configs}) > 1 and k != "method":
            varying.add(k)
    out = []
    for g in groups.values():
        extra = " ".join(f"{k.split('.')[-1]}={g['config'].get(k)}" for k in sorted(varying))
        g["label"] = g["config"]["method"] + (f" ({extra})" if extra else "")
        g["runs"].sort(key=lambda m: m["seed"])
        out.append(g)
    return sorted(out, key=lambda g: g["label"])


def summarise(group) -> dict:
    a = [m["A"][-1] for m in group["runs"]]
    f = [m["F"][-1] for m in group["runs"]]
    row = {"label": group["label"], "A_T": sum(a) / len(a), "F_T": sum(f) / len(f), "n": len(a)}
    if len(a) > 1:
        row["A_range"], row["F_range"] = max(a) - min(a), max(f) - min(f)
    return row


def _plot(groups, out_dir: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    meta = {"Software": None}
    fig, ax = plt.subplots(figsize=(6, 4))
    for g in groups:
        for m in g["runs"]:
            ax.plot(range(1, len(m["A"]) + 1), [100 * v for v in m["A"]], marker="o",
                    label=f"{g['label']} seed {m['seed']}")
    ax.set_xlabel("task")
    ax.set_ylabel("A_i (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "accuracy_curves.png", dpi=100, metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for g in groups:
        for m in g["runs"]:
            trend = m.get("frechet_trend") or []
            pts = [(i, v) for i, v in enumerate(trend, start=1) if v is not None]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=f"{g['label']} seed {m['seed']}")
    ax.set_xlabel("task")
    ax.set_ylabel("Frechet distance to task-1 data")
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "frechet_trend.png", dpi=100, metadata=meta)
    plt.close(fig)


def cmd_report(args) -> int:
    run_dirs = collect_runs(args.runs)
    if not run_dirs:
        print("no run directories with a metrics summary", file=sys.stderr)
        return 2
    groups = group_runs(run_dirs)
    rows = sorted((summarise(g) for g in groups), key=lambda r: (-r["A_T"], r["label"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(rows)
    (out / "report.txt").write_text(table)
    _write_json(out / "report.json", {"rows": rows, "runs": [
        {"label": g["label"], "run_id": m["run_id"], "seed": m["seed"], "A": m["A"], "F": m["F"],
         "frechet_trend": m.get("frechet_trend")} for g in groups for m in g["runs"]]})
    _plot(groups, out)
    print(table, end="")
    return 0


def cmd_dump_samples(args) -> int:
    import torch

    from .conditioning import EmbeddingTable
    from .io import load_checkpoint, save_sample_grid
    from .sampler import GuidanceConfig, generate_replay

    ck = load_checkpoint(args.checkpoint)
    table_path = Path(args.embeddings or ck["extra"].get("table", ""))
    if not table_path.is_file():
        table_path = Path(args.checkpoint).parent.parent / "embeddings.txt"
    table = EmbeddingTable.load(table_path)
    store = ck["prototypes"]
    classes = ([int(c) for c in args.classes.split(",")] if args.classes
               else ck["extra"].get("classes") or sorted(c for c in table.class_ids if c in store))
    clip = ck["extra"].get("clip_x0")
    guidance = GuidanceConfig(args.w, args.steps, args.sampler, tuple(clip) if clip else None)
    guidance.validate(ck["schedule"].K)
    with torch.no_grad():
        mem = generate_replay(classes, store, table, ck["denoiser"], ck["schedule"], guidance,
                              args.n, args.seed, stream="dump")
    save_sample_grid(args.out, mem.x, mem.y, ncols=args.n)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="protoreplay", description="Continual learning with diffusion replay: run, sweep and report experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    sp = sub.add_parser("validate-config", help="check a config against the schema")
    with_config(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("run", help="run one experiment")
    with_config(sp)
    sp.add_argument("--out", help=f"run directory (default ${RUNS_ENV}/<run id>)")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run the cross product of a parameter grid")
    with_config(sp)
    sp.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    sp.add_argument("--jobs", type=int, default=1, help="parallel runs (default sequential)")
    sp.add_argument("--out")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="tabulate and plot finished runs")
    sp.add_argument("runs", nargs="+", help="run or sweep directories")
    sp.add_argument("--out", default="report")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("dump-samples", help="write a sample grid from a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", default="samples.png")
    sp.add_argument("--classes", help="comma-separated class ids (default: all with a prototype)")
    sp.add_argument("--n", type=int, default=10, help="samples per class")
    sp.add_argument("--w", type=float, default=4.0)
    sp.add_argument("--steps", type=int, default=100)
    sp.add_argument("--sampler", default="ddim", choices=["ddim", "ancestral"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--embeddings", help="embedding table (default: the run's copy)")
    sp.set_defaults(func=cmd_dump_samples)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
