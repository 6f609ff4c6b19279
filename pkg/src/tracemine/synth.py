"""Synthetic batch traces with known recurrent job families."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .baseline import canonical_form
from .errors import ConfigError
from .graph import JobGraph, TaskNode, topological_levels


@dataclass
class SynthSpec:
    n_families: int = 10
    recurrences_per_family: int = 10
    n_noise_jobs: int = 50
    period_s: int = 3600
    attr_jitter: float = 0.05
    topology_size_range: tuple[int, int] = (10, 30)
    base_runtime_range: tuple[float, float] = (120.0, 1500.0)
    runtime_noise: float = 0.05
    # per-recurrence start offset, as a fraction of the period; two
    # neighbours may drift apart by twice this, so keep it under half the
    # baseline tolerance
    start_jitter: float = 0.005
    # fraction of families whose topology is shared with a sibling family
    shared_topology_fraction: float = 0.0
    sibling_cpu_factor: float = 10.0
    sibling_runtime_factor: float = 2.0
    max_runtime_s: float = 3600.0

    def __post_init__(self):
        self.topology_size_range = tuple(self.topology_size_range)
        self.base_runtime_range = tuple(self.base_runtime_range)
        if self.recurrences_per_family < 2:
            raise ConfigError("recurrences_per_family must be >= 2")
        if not 0 <= self.attr_jitter < 1:
            raise ConfigError("attr_jitter must lie in [0, 1)")
        if self.period_s not in (900, 3600, 86400):
            raise ConfigError("period_s must be one of 900, 3600, 86400")
        lo, hi = self.topology_size_range
        if not 2 <= lo <= hi:
            raise ConfigError("topology_size_range must satisfy 2 <= min <= max")
        if not 0 <= self.shared_topology_fraction <= 1:
            raise ConfigError("shared_topology_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Family:
    edges: list[tuple[int, int]]
    attrs: np.ndarray
    base_runtime: float
    offset: float
    key: str = ""
    parent: int | None = None


def random_layered_dag(n: int, rng: np.random.Generator, extra_edge_p: float = 0.15):
    """Edges over ids 1..n; every non-source node has a parent one level up."""
    n_levels = int(rng.integers(2, min(n, 8) + 1))
    levels = np.concatenate([np.arange(n_levels), rng.integers(0, n_levels, n - n_levels)])
    levels.sort()
    by_level = [np.flatnonzero(levels == lv) + 1 for lv in range(n_levels)]
    edges = set()
    for lv in range(1, n_levels):
        earlier = np.concatenate(by_level[:lv])
        for child in by_level[lv]:
            edges.add((int(rng.choice(by_level[lv - 1])), int(child)))
            for parent in earlier:
                if rng.random() < extra_edge_p / max(1, lv):
                    edges.add((int(parent), int(child)))
    return sorted(edges)


def random_attributes(n: int, rng: np.random.Generator) -> np.ndarray:
    cpu = 50.0 * rng.integers(1, 17, n)
    mem = rng.uniform(0.05, 3.0, n)
    inst = np.floor(np.exp(rng.uniform(0, math.log(1000), n)))
    return np.column_stack([cpu, mem, inst])


def _task_name(tid: int, parents: list[int]) -> str:
    prefix = "M" if not parents else "R"
    return prefix + "_".join(str(v) for v in [tid] + parents)


def _materialize(name: str, edges, attrs: np.ndarray, start: int, runtime: int) -> JobGraph:
    n = attrs.shape[0]
    parents: dict[int, list[int]] = {i: [] for i in range(1, n + 1)}
    for u, v in edges:
        parents[v].append(u)
    nodes = [TaskNode(i, 0.0, 0.0, 0.0, 0, 0, _task_name(i, sorted(parents[i]))) for i in range(1, n + 1)]
    g = JobGraph(name, nodes, [tuple(e) for e in edges])
    levels = topological_levels(g)
    n_levels = max(levels) + 1
    for t, lv in zip(nodes, levels):
        t.plan_cpu, t.plan_mem, t.instance_num = (float(v) for v in attrs[t.task_id - 1])
        t.start_time = start + (lv * runtime) // n_levels
        t.end_time = start + ((lv + 1) * runtime) // n_levels
    return g


def generate_synthetic_trace(spec: SynthSpec, seed: int) -> tuple[list[JobGraph], dict[str, int]]:
    """Jobs sorted by start time, plus ground truth (family id, -1 for noise)."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.topology_size_range
    keys: set[str] = set()

    def fresh_topology():
        while True:
            n = int(rng.integers(lo, hi + 1))
            edges = random_layered_dag(n, rng)
            probe = _materialize("probe", edges, np.ones((n, 3)), 1, 10)
            key = canonical_form(probe)
            if key not in keys:
                keys.add(key)
                return n, edges, key

    n_pairs = math.ceil(spec.shared_topology_fraction * spec.n_families / 2)
    n_pairs = min(n_pairs, spec.n_families // 2)
    families: list[_Family] = []
    for f in range(spec.n_families):
        offset = float(rng.uniform(1, spec.period_s))
        if f >= spec.n_families - n_pairs:
            # sibling: same DAG as an earlier family, heavier tasks, half a period later
            parent = families[f - (spec.n_families - n_pairs)]
            attrs = parent.attrs.copy()
            attrs[:, 0] *= spec.sibling_cpu_factor
            runtime = min(parent.base_runtime * spec.sibling_runtime_factor,
                          spec.max_runtime_s / (1 + spec.runtime_noise) - 1)
            families.append(_Family(parent.edges, attrs, runtime,
                                    parent.offset + spec.period_s / 2, parent.key,
                                    f - (spec.n_families - n_pairs)))
            continue
        n, edges, key = fresh_topology()
        runtime = float(rng.uniform(*spec.base_runtime_range))
        families.append(_Family(edges, random_attributes(n, rng), runtime, offset, key))

    def jitter(attrs):
        if spec.attr_jitter == 0:
            return attrs.copy()
        out = attrs * (1 + rng.uniform(-spec.attr_jitter, spec.attr_jitter, attrs.shape))
        out[:, 1] = np.clip(out[:, 1], 0, 100)
        out[:, 2] = np.maximum(1, np.round(out[:, 2]))
        return out

    def noisy_runtime(base):
        r = base * (1 + rng.uniform(-spec.runtime_noise, spec.runtime_noise)) if spec.runtime_noise else base
        return max(2, int(round(r)))

    jobs: list[JobGraph] = []
    truth: dict[str, int] = {}
    for f, fam in enumerate(families):
        for k in range(spec.recurrences_per_family):
            start = fam.offset + k * spec.period_s
            if spec.start_jitter:
                start += rng.uniform(-spec.start_jitter, spec.start_jitter) * spec.period_s
            name = f"fam{f:03d}_run{k:03d}"
            jobs.append(_materialize(name, fam.edges, jitter(fam.attrs), max(1, int(round(start))),
                                     noisy_runtime(fam.base_runtime)))
            truth[name] = f
    horizon = spec.period_s * (spec.recurrences_per_family + 1)
    for i in range(spec.n_noise_jobs):
        n, edges, _ = fresh_topology()
        name = f"noise{i:04d}"
        start = int(rng.integers(1, horizon))
        runtime = noisy_runtime(float(rng.uniform(*spec.base_runtime_range)))
        jobs.append(_materialize(name, edges, random_attributes(n, rng), start, runtime))
        truth[name] = -1
    jobs.sort(key=lambda j: (min(t.start_time for t in j.nodes), j.job_name))
    return jobs, truth


def write_ground_truth(path, truth: dict[str, int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["job_name", "family_label"])
        for name in sorted(truth):
            w.writerow([name, truth[name]])


def read_ground_truth(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: int(r[1]) for r in rows[1:]}
