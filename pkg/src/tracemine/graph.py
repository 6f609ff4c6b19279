"""Attributed job DAGs and the static per-graph computations on them."""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CycleError, DataError

NODE_FEATURES = ("plan_cpu", "plan_mem", "instance_num")

FEATURE_NAMES = (
    "node_count",
    "edge_count",
    "density",
    "avg_degree",
    "max_in_degree",
    "max_out_degree",
    "source_count",
    "sink_count",
    "longest_path_len",
    "depth_ratio",
    "level_count",
    "max_level_width",
    "total_instance_num",
    "avg_instance_num",
    "max_instance_num",
    "total_plan_cpu",
    "avg_plan_cpu",
    "total_plan_mem",
    "avg_plan_mem",
    "weak_component_count",
)


@dataclass
class TaskNode:
    task_id: int
    plan_cpu: float
    plan_mem: float
    instance_num: float
    start_time: float
    end_time: float
    name: str = ""
    status: str = "Terminated"

    @property
    def features(self) -> tuple[float, float, float]:
        return (self.plan_cpu, self.plan_mem, self.instance_num)


@dataclass
class JobGraph:
    """One batch job: tasks as nodes, parent -> child edges.

    Edge attributes do not exist in the trace, so there are none here.
    ``flags`` records ingest problems ("dangling dependency", "duplicate id",
    "undefined value") that make the job unusable downstream.
    """

    job_name: str
    nodes: list[TaskNode]
    edges: list[tuple[int, int]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def ids(self) -> list[int]:
        return [t.task_id for t in self.nodes]

    def index(self) -> dict[int, int]:
        return {t.task_id: i for i, t in enumerate(self.nodes)}

    def edge_index(self) -> list[tuple[int, int]]:
        """Edges as (row, row) positions into ``nodes``."""
        pos = self.index()
        return [(pos[u], pos[v]) for u, v in self.edges]

    def feature_matrix(self) -> np.ndarray:
        return np.array([t.features for t in self.nodes], dtype=float).reshape(self.n, 3)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=np.int8)
        for i, j in self.edge_index():
            a[i, j] = 1
        return a

    def check_structure(self) -> None:
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise DataError(f"{self.job_name}: duplicate task ids")
        known = set(ids)
        seen = set()
        for u, v in self.edges:
            if u not in known or v not in known:
                raise DataError(f"{self.job_name}: edge {u}->{v} references a missing task")
            if u == v:
                raise DataError(f"{self.job_name}: self-loop on {u}")
            if (u, v) in seen:
                raise DataError(f"{self.job_name}: duplicate edge {u}->{v}")
            seen.add((u, v))

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "job_name": self.job_name,
            "nodes": [
                {
                    "task_id": t.task_id,
                    "name": t.name,
                    "status": t.status,
                    "plan_cpu": t.plan_cpu,
                    "plan_mem": t.plan_mem,
                    "instance_num": t.instance_num,
                    "start_time": t.start_time,
                    "end_time": t.end_time,
                }
                for t in self.nodes
            ],
            "edges": [list(e) for e in self.edges],
        }
        if self.flags:
            out["flags"] = list(self.flags)
        if self.metadata:
            out["metadata"] = self.metadata
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "JobGraph":
        nodes = [TaskNode(**t) for t in d["nodes"]]
        edges = [(int(u), int(v)) for u, v in d.get("edges", [])]
        return cls(d["job_name"], nodes, edges, list(d.get("flags", [])), dict(d.get("metadata", {})))


def successors(graph: JobGraph) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(graph.n)]
    for i, j in graph.edge_index():
        out[i].append(j)
    return out


def predecessors(graph: JobGraph) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(graph.n)]
    for i, j in graph.edge_index():
        out[j].append(i)
    return out


def topological_order(graph: JobGraph) -> list[int]:
    """Kahn ordering of node positions. Raises CycleError if nodes remain."""
    succ = successors(graph)
    indeg = [0] * graph.n
    for i, j in graph.edge_index():
        indeg[j] += 1
    queue = deque(i for i in range(graph.n) if indeg[i] == 0)
    order = []
    while queue:
        i = queue.popleft()
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                queue.append(j)
    if len(order) != graph.n:
        stuck = {graph.nodes[i].task_id for i in range(graph.n) if indeg[i] > 0}
        raise CycleError(stuck)
    return order


def validate_dag(graph: JobGraph) -> None:
    """Raise CycleError (or DataError for malformed edges); return None when ok."""
    graph.check_structure()
    topological_order(graph)


def is_dag(graph: JobGraph) -> bool:
    try:
        validate_dag(graph)
    except DataError:
        return False
    return True


def topological_levels(graph: JobGraph) -> list[int]:
    """Level per node position: 0 for sources, else 1 + max over predecessors."""
    pred = predecessors(graph)
    level = [0] * graph.n
    for i in topological_order(graph):
        if pred[i]:
            level[i] = 1 + max(level[p] for p in pred[i])
    return level


def weak_components(graph: JobGraph) -> list[list[int]]:
    parent = list(range(graph.n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in graph.edge_index():
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(graph.n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def job_runtime(graph: JobGraph) -> float:
    if not graph.nodes:
        raise DataError(f"{graph.job_name}: job has no tasks")
    starts = [t.start_time for t in graph.nodes]
    ends = [t.end_time for t in graph.nodes]
    if any(v is None or not np.isfinite(v) for v in starts + ends):
        raise DataError(f"{graph.job_name}: undefined task times")
    return max(ends) - min(starts)


def job_start(graph: JobGraph) -> float:
    return min(t.start_time for t in graph.nodes)


def extract_static_features(graph: JobGraph) -> dict[str, float]:
    n = graph.n
    edges = graph.edge_index()
    m = len(edges)
    indeg = np.zeros(n, dtype=int)
    outdeg = np.zeros(n, dtype=int)
    for i, j in edges:
        outdeg[i] += 1
        indeg[j] += 1
    levels = topological_levels(graph)
    longest = max(levels) if levels else 0
    widths = np.bincount(levels) if levels else np.zeros(1, dtype=int)
    attrs = graph.feature_matrix()
    cpu, mem, inst = attrs[:, 0], attrs[:, 1], attrs[:, 2]
    return {
        "node_count": float(n),
        "edge_count": float(m),
        "density": m / (n * (n - 1)) if n > 1 else 0.0,
        "avg_degree": 2.0 * m / n,
        "max_in_degree": float(indeg.max()),
        "max_out_degree": float(outdeg.max()),
        "source_count": float(np.sum(indeg == 0)),
        "sink_count": float(np.sum(outdeg == 0)),
        "longest_path_len": float(longest),
        "depth_ratio": longest / n,
        "level_count": float(longest + 1),
        "max_level_width": float(widths.max()),
        "total_instance_num": float(inst.sum()),
        "avg_instance_num": float(inst.mean()),
        "max_instance_num": float(inst.max()),
        "total_plan_cpu": float(cpu.sum()),
        "avg_plan_cpu": float(cpu.mean()),
        "total_plan_mem": float(mem.sum()),
        "avg_plan_mem": float(mem.mean()),
        "weak_component_count": float(len(weak_components(graph))),
    }


def feature_vector(graph: JobGraph) -> np.ndarray:
    feats = extract_static_features(graph)
    return np.array([feats[k] for k in FEATURE_NAMES])


def feature_table(graphs: Sequence[JobGraph]) -> np.ndarray:
    return np.array([feature_vector(g) for g in graphs]).reshape(len(graphs), len(FEATURE_NAMES))


def permute_nodes(graph: JobGraph, mapping: dict[int, int]) -> JobGraph:
    """Relabel task ids through ``mapping`` and shuffle node order to match.

    The node list is re-sorted by new id so that a relabeling also changes
    the storage order, which is what invariance tests need to exercise.
    """
    ids = graph.ids()
    if set(mapping) != set(ids) or sorted(mapping.values()) != sorted(ids):
        raise DataError("permutation must be a bijection on the graph's task ids")
    nodes = [
        TaskNode(mapping[t.task_id], t.plan_cpu, t.plan_mem, t.instance_num,
                 t.start_time, t.end_time, t.name, t.status)
        for t in graph.nodes
    ]
    nodes.sort(key=lambda t: t.task_id)
    edges = sorted((mapping[u], mapping[v]) for u, v in graph.edges)
    return JobGraph(graph.job_name, nodes, edges, list(graph.flags), dict(graph.metadata))


# ---------------------------------------------------------------------------
# files


def write_jobs(path, graphs: Iterable[JobGraph]) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_dict(), sort_keys=True) + "\n")


def read_jobs(path) -> list[JobGraph]:
    with open(path) as fh:
        return [JobGraph.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_feature_csv(path, graphs: Sequence[JobGraph]) -> None:
    """Columns: the 20 features in FEATURE_NAMES order, runtime_s, job_name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(FEATURE_NAMES) + ["runtime_s", "job_name"])
        for g in graphs:
            feats = extract_static_features(g)
            w.writerow([repr(feats[k]) for k in FEATURE_NAMES] + [repr(float(job_runtime(g))), g.job_name])


def read_feature_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Return (job names, feature matrix, runtimes)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if tuple(header[: len(FEATURE_NAMES)]) != FEATURE_NAMES:
        raise DataError(f"{path}: unexpected feature columns")
    names = [r[-1] for r in body]
    x = np.array([[float(v) for v in r[: len(FEATURE_NAMES)]] for r in body]).reshape(len(body), len(FEATURE_NAMES))
    y = np.array([float(r[len(FEATURE_NAMES)]) for r in body])
    return names, x, y
