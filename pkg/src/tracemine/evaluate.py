"""Runtime prediction from clusters and the error statistics over it."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict, field
from math import comb
from typing import Sequence

import numpy as np

from .errors import DataError

REPORTED_INTERVAL = (-1000.0, 1000.0)


@dataclass
class ClusterPrediction:
    cluster: int
    target_job: str
    predicted_s: float
    actual_s: float
    size: int

    @property
    def error(self) -> float:
        return self.predicted_s - self.actual_s


@dataclass
class EvalReport:
    method: str
    n_jobs: int
    n_clusters: int
    avg_cluster_size: float
    outlier_proportion: float
    mae: float
    mse: float
    error_variance: float
    abs_error_variance: float
    n_predictions: int
    skipped_clusters: int = 0
    predictions: list[ClusterPrediction] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("predictions")
        return d


def cluster_runtime_prediction(labels: Sequence[int], runtimes: Sequence[float], start_times: Sequence[float],
                               names: Sequence[str]) -> tuple[list[ClusterPrediction], int]:
    """Predict each cluster's most recent run as the mean of the others.

    Returns the predictions (ordered by cluster id) and the number of
    clusters skipped for having fewer than two members.
    """
    labels = np.asarray(labels, dtype=int)
    if not (len(labels) == len(runtimes) == len(start_times) == len(names)):
        raise DataError("labels, runtimes, start times and names must align")
    preds = []
    skipped = 0
    for c in sorted(set(labels[labels >= 0].tolist())):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            skipped += 1
            continue
        target = max(members, key=lambda i: (start_times[i], names[i]))
        others = [runtimes[i] for i in members if i != target]
        preds.append(ClusterPrediction(int(c), names[target], float(np.mean(others)),
                                       float(runtimes[target]), int(members.size)))
    return preds, skipped


def error_stats(errors) -> dict:
    e = np.asarray(errors, dtype=float)
    return {
        "mae": float(np.mean(np.abs(e))),
        "mse": float(np.mean(e * e)),
        "error_variance": float(np.var(e)),
        "abs_error_variance": float(np.var(np.abs(e))),
    }


def compute_metrics(predictions: Sequence[ClusterPrediction], total_jobs: int, labels: Sequence[int],
                    method: str = "", skipped: int = 0) -> EvalReport:
    if not predictions:
        raise DataError("no cluster predictions to evaluate")
    labels = np.asarray(labels, dtype=int)
    clustered = labels[labels >= 0]
    n_clusters = len(set(clustered.tolist()))
    stats = error_stats([p.error for p in predictions])
    return EvalReport(
        method=method,
        n_jobs=int(total_jobs),
        n_clusters=n_clusters,
        avg_cluster_size=float(clustered.size / n_clusters) if n_clusters else 0.0,
        outlier_proportion=float(np.sum(labels < 0) / total_jobs) if total_jobs else 0.0,
        n_predictions=len(predictions),
        skipped_clusters=skipped,
        predictions=list(predictions),
        **stats,
    )


def shared_subset_compare(preds_a: Sequence[ClusterPrediction], preds_b: Sequence[ClusterPrediction],
                          names: tuple[str, str] = ("a", "b")) -> dict:
    """Error statistics of both methods on the target jobs they share."""
    a = {p.target_job: p for p in preds_a}
    b = {p.target_job: p for p in preds_b}
    shared = sorted(set(a) & set(b))
    if not shared:
        return {"empty": True, "n_shared": 0, names[0]: None, names[1]: None}
    return {
        "empty": False,
        "n_shared": len(shared),
        names[0]: error_stats([a[j].error for j in shared]),
        names[1]: error_stats([b[j].error for j in shared]),
    }


def error_histogram(errors, bin_width: float, value_range: tuple[float, float],
                    interval: tuple[float, float] = REPORTED_INTERVAL) -> dict:
    """Counts per bin over ``value_range`` (last bin closed) plus under/overflow."""
    if bin_width <= 0:
        raise DataError("bin_width must be positive")
    lo, hi = value_range
    e = np.asarray(errors, dtype=float)
    n_bins = max(1, int(np.ceil((hi - lo) / bin_width - 1e-9)))
    edges = lo + bin_width * np.arange(n_bins + 1)
    inside = e[(e >= lo) & (e <= edges[-1])]
    counts, _ = np.histogram(inside, bins=edges)
    return {
        "edges": edges.tolist(),
        "counts": counts.astype(int).tolist(),
        "underflow": int(np.sum(e < lo)),
        "overflow": int(np.sum(e > edges[-1])),
        "interval": list(interval),
        "proportion_in_interval": float(np.mean((e >= interval[0]) & (e <= interval[1]))) if e.size else 0.0,
    }


def _singletons(labels) -> np.ndarray:
    """Replace each -1 by a fresh label so noise points count as singletons."""
    lab = np.asarray(labels).astype(int).copy()
    noise = np.flatnonzero(lab < 0)
    lab[noise] = lab.max(initial=0) + 1 + np.arange(noise.size)
    return lab


def adjusted_rand_index(labels, truth) -> float:
    a = _singletons(labels)
    b = _singletons(truth)
    if a.shape != b.shape:
        raise DataError("label vectors differ in length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max(initial=-1) + 1, bi.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = sum(comb(int(v), 2) for v in table.ravel())
    sum_rows = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    if total == 0:
        return 1.0
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


# files ---------------------------------------------------------------------


def write_predictions(path, preds: Sequence[ClusterPrediction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "target_job", "predicted_s", "actual_s", "error_s", "cluster_size"])
        for p in preds:
            w.writerow([p.cluster, p.target_job, repr(p.predicted_s), repr(p.actual_s), repr(p.error), p.size])


def read_predictions(path) -> list[ClusterPrediction]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [ClusterPrediction(int(r[0]), r[1], float(r[2]), float(r[3]), int(r[5])) for r in rows]


def write_histogram(path, hist: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        w.writerow(["-inf", repr(hist["edges"][0]), hist["underflow"]])
        for lo, hi, c in zip(hist["edges"], hist["edges"][1:], hist["counts"]):
            w.writerow([repr(lo), repr(hi), c])
        w.writerow([repr(hist["edges"][-1]), "inf", hist["overflow"]])


def save_report(path, report: EvalReport, extra: dict | None = None) -> None:
    d = report.summary()
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
