import itertools
import math

import numpy as np
import pytest

from tracemine.graph import JobGraph, TaskNode


def make_graph(n_or_ids, edges=(), name="job", attrs=None, times=None):
    ids = list(range(1, n_or_ids + 1)) if isinstance(n_or_ids, int) else list(n_or_ids)
    nodes = []
    for k, tid in enumerate(ids):
        cpu, mem, inst = attrs[k] if attrs is not None else (100.0, 1.0, 1.0)
        start, end = times[k] if times is not None else (100, 200)
        nodes.append(TaskNode(tid, float(cpu), float(mem), float(inst), start, end, f"T{tid}"))
    return JobGraph(name, nodes, [tuple(e) for e in edges])


def random_dag(rng, n, p=0.3, name="job"):
    """Random DAG on ids 1..n with a hidden random topological order."""
    order = rng.permutation(n) + 1
    edges = [(int(order[i]), int(order[j])) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    attrs = np.column_stack([
        50.0 * rng.integers(1, 10, n), rng.uniform(0.1, 5, n), rng.integers(1, 100, n).astype(float)
    ])
    return make_graph(n, edges, name, attrs)


def random_permutation_map(rng, graph):
    ids = graph.ids()
    return dict(zip(ids, (int(v) for v in rng.permutation(ids))))


def brute_isomorphic(a, b):
    if a.n != b.n or len(a.edges) != len(b.edges):
        return False
    ia, ib = a.ids(), b.ids()
    eb = set(b.edges)
    for perm in itertools.permutations(ib):
        m = dict(zip(ia, perm))
        if all((m[u], m[v]) in eb for u, v in a.edges):
            return True
    return False


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _chain_rows(job, n_tasks, start=1000, runtime=600, status="Terminated"):
    """Rows for a valid fan-in job: M1..M(n-1) feed R(n)."""
    rows = []
    for t in range(1, n_tasks):
        rows.append([f"M{t}", 2, job, "1", status, start, start + runtime // 2, 100, 0.5])
    parents = "_".join(str(t) for t in range(1, n_tasks))
    rows.append([f"R{n_tasks}_{parents}", 1, job, "1", status, start + runtime // 2, start + runtime, 200, 1.0])
    return rows


def cleaning_fixture():
    """50 jobs with known violations of each cleaning rule.

    Returns (csv text, expected survivor names, expected drop counts).
    """
    rows = []
    survivors = []
    for i in range(30):
        job = f"ok_{i:02d}"
        n = 10 + i % 6
        runtime = 3600 if i == 0 else 300 + 50 * i
        rows += _chain_rows(job, n, start=1000 + 7 * i, runtime=runtime)
        survivors.append(job)
    # (a) one task not terminated
    for i in range(4):
        r = _chain_rows(f"status_{i}", 12)
        r[3][4] = "Failed" if i % 2 else "Running"
        rows += r
    # (b) undefined values: empty end time, zero start time
    for i in range(4):
        r = _chain_rows(f"undef_{i}", 12)
        if i < 2:
            r[5][6] = ""
        else:
            r[2][5] = 0
        rows += r
    # (c) dangling parent, duplicate id, and a real cycle
    r = _chain_rows("dag_0", 12)
    r[-1][0] = r[-1][0] + "_99"
    rows += r
    r = _chain_rows("dag_1", 12)
    r[4][0] = "M2"
    rows += r
    r = _chain_rows("dag_2", 12)
    r[0][0], r[1][0] = "M1_2", "M2_1"
    rows += r
    r = _chain_rows("dag_3", 12)
    r[0][0], r[1][0], r[2][0] = "M1_3", "M2_1", "M3_2"
    rows += r
    # (d) fewer than 10 tasks
    for i, n in enumerate((9, 5, 2, 1)):
        rows += _chain_rows(f"small_{i}", n) if n > 1 else [["M1", 1, "small_3", "1", "Terminated", 10, 20, 100, 1]]
    # (e) runtime above one hour
    for i, rt in enumerate((3601, 3700, 7200, 86400)):
        rows += _chain_rows(f"long_{i}", 11, runtime=rt)
    text = "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"
    counts = {"status": 4, "undefined_values": 4, "invalid_dag": 4, "too_few_tasks": 4, "runtime": 4}
    return text, survivors, counts


def small_config(seed=0, **synth):
    """A synthetic pipeline config that runs in seconds."""
    spec = {"n_families": 6, "recurrences_per_family": 6, "n_noise_jobs": 12}
    spec.update(synth)
    return {
        "seed": seed,
        "synth": spec,
        "select": {"k": 3, "extra_trees": {"n_trees": 10}},
        "train": {"hidden_dim": 8, "n_layers": 2, "max_epochs": 3, "patience": 2, "batch_size": 32},
        "sweep": {"eps_log10_min": -3.0, "eps_log10_max": 0.0, "steps": 7},
        "cluster": {"eps": "sweep", "min_samples": 2},
    }


def reference_dbscan(p, eps, min_samples):
    """Union-find over core points; borders go to the lowest-numbered adjacent cluster."""
    n = len(p)
    d = np.array([[math.dist(a, b) for b in p] for a in p])
    adj = d <= eps
    core = adj.sum(axis=1) >= min_samples
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if core[i] and core[j] and adj[i, j]:
                ri, rj = find(i), find(j)
                parent[max(ri, rj)] = min(ri, rj)
    labels = [-1] * n
    root_label = {}
    for i in range(n):
        if core[i]:
            r = find(i)
            root_label.setdefault(r, len(root_label))
            labels[i] = root_label[r]
    for i in range(n):
        if not core[i]:
            near = [labels[j] for j in range(n) if core[j] and adj[i, j]]
            if near:
                labels[i] = min(near)
    return labels
