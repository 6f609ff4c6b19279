"""Command-line pipeline: each subcommand reads and writes flat files in a workdir.

Every write is recorded in ``manifest.json`` with the content hashes of the
inputs it was produced from, the config hash and the tool version.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import baseline_clustering
from .cluster import DEFAULT_EPS, Clustering, dbscan, eps_sweep, preprocess_embeddings
from .encoder import TrainConfig, EncoderModel, encode_all, init_model, read_embeddings, train, write_embeddings
from .errors import ConfigError, DataError, MissingArtifactError, TraceMineError
from .evaluate import (
    EvalReport,
    adjusted_rand_index,
    cluster_runtime_prediction,
    compute_metrics,
    error_histogram,
    read_predictions,
    save_report,
    shared_subset_compare,
    write_histogram,
    write_predictions,
)
from .graph import FEATURE_NAMES, job_runtime, job_start, read_feature_csv, read_jobs, write_feature_csv, write_jobs
from .ingest import IngestConfig, build_job_graphs, clean_jobs, parse_task_table, stratified_split
from .selection import SelectionResult, select_targets
from .synth import SynthSpec, generate_synthetic_trace, read_ground_truth, write_ground_truth

log = logging.getLogger("tracemine")

SUBCOMMANDS = ("ingest", "synth", "features", "select", "train", "encode", "cluster",
               "baseline", "evaluate", "compare", "sweep", "report")
METHODS = ("traceec", "baseline")
# per-method fields every evaluation summary carries
EVAL_FIELDS = tuple(f.name for f in fields(EvalReport) if f.name != "predictions")

# artifact -> subcommand that writes it
PRODUCERS = {
    "jobs.jsonl": "ingest",
    "ingest_report.json": "ingest",
    "ground_truth.csv": "synth",
    "synth_report.json": "synth",
    "features.csv": "features",
    "split.json": "features",
    "selection.json": "select",
    "model.json": "train",
    "train_history.json": "train",
    "embeddings.csv": "encode",
    "clustering_traceec.csv": "cluster",
    "clustering_traceec.json": "cluster",
    "clustering_baseline.csv": "baseline",
    "clustering_baseline.json": "baseline",
    "eval_traceec.json": "evaluate",
    "eval_baseline.json": "evaluate",
    "predictions_traceec.csv": "evaluate",
    "predictions_baseline.csv": "evaluate",
    "compare.json": "compare",
    "sweep.json": "sweep",
    "report.json": "report",
}

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {"trace": None, "workdir": "work"},
    "ingest": {"min_tasks": 10, "max_runtime_s": 3600, "required_status": "Terminated"},
    "split": {"test_fraction": 0.2, "val_fraction": 0.25, "n_bins": 10},
    "select": {"k": 5, "extra_trees": {"n_trees": 100, "max_depth": 12, "min_leaf": 5}},
    "train": {},
    "cluster": {"eps": DEFAULT_EPS, "min_samples": 2},
    "sweep": {"eps_log10_min": -4.0, "eps_log10_max": 0.0, "steps": 17},
    "baseline": {"periods": [900, 3600, 86400], "tolerance": 0.03, "strict": False},
    "evaluate": {"methods": list(METHODS), "bin_width": 100.0, "range": [-3000.0, 3000.0]},
    "synth": None,
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        cfg = _merge(cfg, user)
    cfg = _merge(cfg, overrides or {})
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("config needs an integer seed")
    # paths may come from the environment; numerics never do
    if os.environ.get("TRACEMINE_TRACE"):
        cfg["paths"]["trace"] = os.environ["TRACEMINE_TRACE"]
    if os.environ.get("TRACEMINE_WORKDIR"):
        cfg["paths"]["workdir"] = os.environ["TRACEMINE_WORKDIR"]
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "paths"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    extra = set(cfg["train"]) - known
    if extra:
        raise ConfigError(f"unknown train settings {sorted(extra)}")
    return TrainConfig(**{"seed": cfg["seed"], **cfg["train"]})


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Workspace:
    def __init__(self, cfg: dict, workdir=None, force: bool = False):
        self.cfg = cfg
        self.dir = Path(workdir or cfg["paths"]["workdir"])
        self.force = force
        self.hash = config_hash(cfg)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
            if self.manifest.get("config_hash") != self.hash and not force:
                raise ConfigError(
                    f"config differs from the one recorded in {self.manifest_path}; pass --force to overwrite"
                )
        else:
            self.manifest = {"artifacts": {}}
        self.manifest["config_hash"] = self.hash
        self.manifest["tool_version"] = __version__

    def path(self, name: str) -> Path:
        return self.dir / name

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(name, PRODUCERS.get(name, "?"))
        return p

    def record(self, subcommand: str, outputs, inputs) -> None:
        in_hashes = {}
        for item in inputs:
            p = Path(item)
            key = p.name if p.parent == self.dir else str(item)
            in_hashes[key] = _sha256(p)
        for name in outputs:
            self.manifest["artifacts"][name] = {
                "producer": subcommand,
                "sha256": _sha256(self.path(name)),
                "inputs": in_hashes,
                "config_hash": self.hash,
                "tool_version": __version__,
            }
        _dump(self.manifest_path, self.manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(ws: Workspace) -> None:
    trace = ws.cfg["paths"].get("trace")
    if not trace:
        raise ConfigError("paths.trace is not set")
    icfg = IngestConfig(**ws.cfg["ingest"])
    try:
        with open(trace, "rb") as fh:
            records, rejected = parse_task_table(fh, icfg.column_map)
    except OSError as exc:
        raise DataError(f"cannot open trace {trace}: {exc}") from exc
    jobs = build_job_graphs(records, rejected)
    kept, report = clean_jobs(jobs, icfg)
    write_jobs(ws.path("jobs.jsonl"), kept)
    reasons: dict[str, int] = {}
    for r in rejected:
        reasons[r.reason] = reasons.get(r.reason, 0) + 1
    _dump(ws.path("ingest_report.json"), {
        "rows_parsed": len(records),
        "rows_rejected": len(rejected),
        "rejection_reasons": reasons,
        **report.to_dict(),
    })
    ws.record("ingest", ["jobs.jsonl", "ingest_report.json"], [trace])


def cmd_synth(ws: Workspace) -> None:
    if not ws.cfg.get("synth"):
        raise ConfigError("config has no synth section")
    spec = SynthSpec(**ws.cfg["synth"])
    jobs, truth = generate_synthetic_trace(spec, ws.cfg["seed"])
    write_jobs(ws.path("jobs.jsonl"), jobs)
    write_ground_truth(ws.path("ground_truth.csv"), truth)
    _dump(ws.path("synth_report.json"), {"spec": spec.to_dict(), "seed": ws.cfg["seed"], "n_jobs": len(jobs)})
    ws.record("synth", ["jobs.jsonl", "ground_truth.csv", "synth_report.json"], [])


def cmd_features(ws: Workspace) -> None:
    jobs_path = ws.need("jobs.jsonl")
    jobs = read_jobs(jobs_path)
    if len(jobs) < 4:
        raise DataError(f"only {len(jobs)} jobs survived; need at least 4 to split")
    write_feature_csv(ws.path("features.csv"), jobs)
    sp = ws.cfg["split"]
    seed = ws.cfg["seed"]
    train_jobs, test_jobs = stratified_split(jobs, sp["test_fraction"], sp["n_bins"], seed)
    fit_jobs, val_jobs = stratified_split(train_jobs, sp["val_fraction"], sp["n_bins"], seed + 1)
    _dump(ws.path("split.json"), {
        "train": [j.job_name for j in fit_jobs],
        "validation": [j.job_name for j in val_jobs],
        "test": [j.job_name for j in test_jobs],
    })
    ws.record("features", ["features.csv", "split.json"], [jobs_path])


def _load_split(ws: Workspace) -> dict:
    with open(ws.need("split.json")) as fh:
        return json.load(fh)


def cmd_select(ws: Workspace) -> None:
    feats_path = ws.need("features.csv")
    split = _load_split(ws)
    names, x, y = read_feature_csv(feats_path)
    pos = {n: i for i, n in enumerate(names)}
    rows = [pos[n] for n in split["train"] + split["validation"]]
    scfg = ws.cfg["select"]
    result = select_targets(x[rows], y[rows], FEATURE_NAMES, k=scfg["k"], seed=ws.cfg["seed"],
                            extra_trees_params=scfg.get("extra_trees"))
    result.save(ws.path("selection.json"))
    ws.record("select", ["selection.json"], [feats_path, ws.path("split.json")])


def cmd_train(ws: Workspace) -> None:
    jobs_path = ws.need("jobs.jsonl")
    feats_path = ws.need("features.csv")
    split = _load_split(ws)
    sel = SelectionResult.load(ws.need("selection.json"))
    tcfg = train_config(ws.cfg)
    jobs = {j.job_name: j for j in read_jobs(jobs_path)}
    names, x, _ = read_feature_csv(feats_path)
    pos = {n: i for i, n in enumerate(names)}
    cols = [FEATURE_NAMES.index(t) for t in sel.chosen_targets]
    fit = [jobs[n] for n in split["train"]]
    val = [jobs[n] for n in split["validation"]]
    model = init_model(tcfg.seed, 3, tcfg.hidden_dim, tcfg.n_layers, tcfg.max_degree)
    model.fit_scaler(fit)
    model, hist = train(model, fit, x[[pos[n] for n in split["train"]]][:, cols],
                        val, x[[pos[n] for n in split["validation"]]][:, cols], tcfg)
    model.save(ws.path("model.json"))
    _dump(ws.path("train_history.json"), {"config": tcfg.to_dict(), "targets": sel.chosen_targets,
                                          **hist.to_dict()})
    ws.record("train", ["model.json", "train_history.json"],
              [jobs_path, feats_path, ws.path("split.json"), ws.path("selection.json")])


def cmd_encode(ws: Workspace) -> None:
    model_path = ws.need("model.json")
    jobs_path = ws.need("jobs.jsonl")
    model = EncoderModel.load(model_path)
    jobs = read_jobs(jobs_path)
    write_embeddings(ws.path("embeddings.csv"), [j.job_name for j in jobs], encode_all(model, jobs))
    ws.record("encode", ["embeddings.csv"], [model_path, jobs_path])


def _test_points(ws: Workspace):
    emb_path = ws.need("embeddings.csv")
    split = _load_split(ws)
    names, emb = read_embeddings(emb_path)
    pos = {n: i for i, n in enumerate(names)}
    test = split["test"]
    points, _ = preprocess_embeddings(emb[[pos[n] for n in test]])
    return test, points, emb_path


def _truth_for(ws: Workspace, names):
    p = ws.path("ground_truth.csv")
    if not p.exists():
        return None, None
    truth = read_ground_truth(p)
    return np.array([truth.get(n, -1) for n in names], dtype=int), p


def cmd_sweep(ws: Workspace) -> None:
    test, points, emb_path = _test_points(ws)
    sw = ws.cfg["sweep"]
    grid = 10 ** np.linspace(sw["eps_log10_min"], sw["eps_log10_max"], sw["steps"])
    truth, truth_path = _truth_for(ws, test)
    rows = eps_sweep(points, grid, ws.cfg["cluster"]["min_samples"], truth)
    out = {"min_samples": ws.cfg["cluster"]["min_samples"], "rows": rows}
    if truth is not None:
        best = max(rows, key=lambda r: (r["ari"], -r["eps"]))
        out["best_by_ari"] = best
    _dump(ws.path("sweep.json"), out)
    ws.record("sweep", ["sweep.json"], [emb_path, ws.path("split.json")] + ([truth_path] if truth_path else []))


def cmd_cluster(ws: Workspace) -> None:
    test, points, emb_path = _test_points(ws)
    ccfg = ws.cfg["cluster"]
    inputs = [emb_path, ws.path("split.json")]
    eps = ccfg["eps"]
    if eps == "sweep":
        sweep_path = ws.need("sweep.json")
        with open(sweep_path) as fh:
            sweep = json.load(fh)
        if "best_by_ari" not in sweep:
            raise ConfigError('cluster.eps = "sweep" needs a sweep run with ground truth')
        eps = sweep["best_by_ari"]["eps"]
        inputs.append(sweep_path)
    c = dbscan(points, float(eps), int(ccfg["min_samples"]))
    c.method, c.names = "traceec", list(test)
    c.save(ws.path("clustering_traceec.csv"), ws.path("clustering_traceec.json"))
    ws.record("cluster", ["clustering_traceec.csv", "clustering_traceec.json"], inputs)


def cmd_baseline(ws: Workspace) -> None:
    jobs_path = ws.need("jobs.jsonl")
    split = _load_split(ws)
    jobs = {j.job_name: j for j in read_jobs(jobs_path)}
    test = [jobs[n] for n in split["test"]]
    bcfg = ws.cfg["baseline"]
    labels = baseline_clustering(test, bcfg["periods"], bcfg["tolerance"], bcfg["strict"])
    c = Clustering(labels, None, 2, "baseline", [j.job_name for j in test])
    c.save(ws.path("clustering_baseline.csv"), ws.path("clustering_baseline.json"))
    ws.record("baseline", ["clustering_baseline.csv", "clustering_baseline.json"],
              [jobs_path, ws.path("split.json")])


def cmd_evaluate(ws: Workspace) -> None:
    ecfg = ws.cfg["evaluate"]
    paths = {}
    for m in ecfg["methods"]:
        paths[m] = (ws.need(f"clustering_{m}.csv"), ws.need(f"clustering_{m}.json"))
    jobs_path = ws.need("jobs.jsonl")
    jobs = {j.job_name: j for j in read_jobs(jobs_path)}
    for m, (csv_path, json_path) in paths.items():
        c = Clustering.load(csv_path, json_path)
        runtimes = [float(job_runtime(jobs[n])) for n in c.names]
        starts = [float(job_start(jobs[n])) for n in c.names]
        preds, skipped = cluster_runtime_prediction(c.labels, runtimes, starts, c.names)
        write_predictions(ws.path(f"predictions_{m}.csv"), preds)
        outputs = [f"predictions_{m}.csv"]
        if preds:
            report = compute_metrics(preds, len(c.names), c.labels, m, skipped)
            hist = error_histogram([p.error for p in preds], ecfg["bin_width"], tuple(ecfg["range"]))
            write_histogram(ws.path(f"histogram_{m}.csv"), hist)
            extra = {"proportion_in_interval": hist["proportion_in_interval"], "interval": hist["interval"]}
            truth, _ = _truth_for(ws, c.names)
            if truth is not None:
                extra["ari"] = adjusted_rand_index(c.labels, truth)
            save_report(ws.path(f"eval_{m}.json"), report, extra)
            outputs += [f"histogram_{m}.csv"]
        else:
            _dump(ws.path(f"eval_{m}.json"), {"method": m, "n_predictions": 0, "n_jobs": len(c.names)})
        outputs.append(f"eval_{m}.json")
        ws.record("evaluate", outputs, [csv_path, json_path, jobs_path])


def cmd_compare(ws: Workspace) -> None:
    a = ws.need("predictions_traceec.csv")
    b = ws.need("predictions_baseline.csv")
    result = shared_subset_compare(read_predictions(a), read_predictions(b), ("traceec", "baseline"))
    _dump(ws.path("compare.json"), result)
    ws.record("compare", ["compare.json"], [a, b])


def cmd_report(ws: Workspace) -> None:
    inputs = [ws.need("eval_traceec.json"), ws.need("eval_baseline.json"), ws.need("compare.json")]
    out = {"tool_version": __version__, "config_hash": ws.hash, "methods": {}}
    for m, p in zip(METHODS, inputs):
        with open(p) as fh:
            out["methods"][m] = json.load(fh)
    with open(inputs[2]) as fh:
        out["shared_subset"] = json.load(fh)
    for name in ("ingest_report.json", "synth_report.json", "selection.json", "train_history.json", "sweep.json"):
        p = ws.path(name)
        if p.exists():
            with open(p) as fh:
                data = json.load(fh)
            if name == "selection.json":
                data = {"chosen_targets": data["chosen_targets"], "rankings": data["rankings"]}
            if name == "train_history.json":
                data = {k: data[k] for k in ("best_epoch", "stopped_early", "targets")} | {
                    "epochs_run": len(data["val_loss"])}
            out[name.rsplit(".", 1)[0]] = data
            inputs.append(p)
    _dump(ws.path("report.json"), out)
    ws.record("report", ["report.json"], inputs)


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "features": cmd_features,
    "select": cmd_select,
    "train": cmd_train,
    "encode": cmd_encode,
    "cluster": cmd_cluster,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def run_subcommand(name: str, cfg: dict, workdir=None, force: bool = False) -> Workspace:
    if name not in COMMANDS:
        raise ConfigError(f"unknown subcommand {name!r}")
    ws = Workspace(cfg, workdir, force)
    COMMANDS[name](ws)
    return ws


def run_pipeline(cfg: dict, workdir, steps=None, force: bool = False) -> Path:
    """Run ``steps`` (default: the full synthetic pipeline) in order."""
    if steps is None:
        steps = ["synth" if cfg.get("synth") else "ingest", "features", "select", "train", "encode",
                 "sweep", "cluster", "baseline", "evaluate", "compare", "report"]
    for i, step in enumerate(steps):
        run_subcommand(step, cfg, workdir, force=force and i == 0)
    return Path(workdir)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracemine", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--workdir", help="artifact directory (overrides paths.workdir)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--force", action="store_true", help="ignore a config-hash mismatch with the manifest")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed} if args.seed is not None else {}
        cfg = load_config(args.config, overrides)
        run_subcommand(args.subcommand, cfg, args.workdir, args.force)
    except TraceMineError as exc:
        print(f"tracemine {args.subcommand}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"tracemine {args.subcommand}: internal error: {exc!r}", file=sys.stderr)
        return 3
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
