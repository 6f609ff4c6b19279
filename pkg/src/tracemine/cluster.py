"""Embedding preprocessing and density-based clustering."""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import euclidean
from .errors import DataError
from .selection import standardize

DEFAULT_EPS = 10 ** -3.5
NOISE = -1


@dataclass
class Clustering:
    labels: np.ndarray
    eps: float | None
    min_samples: int
    method: str = "traceec"
    names: list[str] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    def sizes(self) -> list[int]:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_clusters).tolist()

    def sidecar(self) -> dict:
        sizes = self.sizes()
        hist = {str(s): c for s, c in sorted(zip(*np.unique(sizes, return_counts=True)))} if sizes else {}
        return {
            "method": self.method,
            "eps": self.eps,
            "min_samples": self.min_samples,
            "n_points": int(self.labels.size),
            "n_clusters": self.n_clusters,
            "n_noise": int(np.sum(self.labels == NOISE)),
            "cluster_size_histogram": {k: int(v) for k, v in hist.items()},
        }

    def save(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["job_name", "label"])
            for name, lab in zip(self.names, self.labels):
                w.writerow([name, int(lab)])
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, csv_path, json_path) -> "Clustering":
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        with open(json_path) as fh:
            meta = json.load(fh)
        return cls(np.array([int(r[1]) for r in rows], dtype=int), meta["eps"], meta["min_samples"],
                   meta.get("method", ""), [r[0] for r in rows])


def preprocess_embeddings(emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardize columns, then scale each row to unit length.

    Returns the matrix and a boolean flag per row that stayed all-zero.
    """
    z, _, _ = standardize(emb)
    norms = np.linalg.norm(z, axis=1)
    zero = norms == 0
    out = z / np.where(zero, 1.0, norms)[:, None]
    return out, zero


def euclidean_distance(a, b) -> float:
    return euclidean(a, b)


def distance_matrix(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    sq = np.einsum("ij,ij->i", p, p)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def neighborhoods(points: np.ndarray, eps: float) -> list[np.ndarray]:
    """Indices within ``eps`` (inclusive) of each point, itself included."""
    p = np.asarray(points, dtype=float)
    approx = distance_matrix(p)
    # the Gram form loses precision near the radius, so it only preselects
    # candidates; membership is decided on exact differences
    slack = 1e-9 * (1.0 + np.abs(p).max(initial=0.0)) ** 2
    out = []
    for i in range(p.shape[0]):
        cand = np.flatnonzero(approx[i] <= eps + np.sqrt(slack) + 1e-12)
        exact = np.sqrt(np.sum((p[cand] - p[i]) ** 2, axis=1))
        out.append(cand[exact <= eps])
    return out


def dbscan(points: np.ndarray, eps: float = DEFAULT_EPS, min_samples: int = 2) -> Clustering:
    """Classic DBSCAN with scan-order expansion.

    A point is core when at least ``min_samples`` points (itself included)
    lie within ``eps``. Border points join the first cluster that reaches
    them while scanning points in input order.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2:
        raise DataError("dbscan expects a 2-d point matrix")
    n = p.shape[0]
    nbrs = neighborhoods(p, eps)
    core = np.array([len(nb) >= min_samples for nb in nbrs], dtype=bool)
    labels = np.full(n, NOISE, dtype=int)
    visited = np.zeros(n, dtype=bool)
    current = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = current
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in nbrs[j]:
                if labels[k] == NOISE:
                    labels[k] = current
                if core[k] and not visited[k]:
                    visited[k] = True
                    queue.append(k)
        current += 1
    return Clustering(labels, eps, min_samples)


def eps_sweep(points: np.ndarray, eps_values: Sequence[float], min_samples: int = 2,
              truth: np.ndarray | None = None) -> list[dict]:
    from .evaluate import adjusted_rand_index

    rows = []
    for eps in eps_values:
        c = dbscan(points, eps, min_samples)
        row = {
            "eps": float(eps),
            "n_clusters": c.n_clusters,
            "noise_fraction": float(np.mean(c.labels == NOISE)) if c.labels.size else 0.0,
        }
        if truth is not None:
            row["ari"] = adjusted_rand_index(c.labels, truth)
        rows.append(row)
    return rows
