"""Recurrent-job detection: isomorphic DAGs with periodic start times.

Canonical keys come from color refinement plus individualization search,
with twin and automorphism pruning so that the highly symmetric DAGs common
in batch traces (fan-in of many identical map tasks) stay cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .errors import InvariantError
from .graph import JobGraph, job_start, topological_levels, weak_components

PERIODS = (900, 3600, 86400)
TOLERANCE = 0.03


def _refine(colors: list[int], pred: list[list[int]], succ: list[list[int]]) -> list[int]:
    n_colors = len(set(colors))
    while True:
        sigs = [
            (colors[v], tuple(sorted(colors[u] for u in pred[v])), tuple(sorted(colors[w] for w in succ[v])))
            for v in range(len(colors))
        ]
        rank = {s: i for i, s in enumerate(sorted(set(sigs)))}
        colors = [rank[s] for s in sigs]
        if len(rank) == n_colors:
            return colors
        n_colors = len(rank)


class _Search:
    def __init__(self, pred, succ, edges):
        self.pred = pred
        self.succ = succ
        self.edges = edges
        n = len(pred)
        twin_of: dict[tuple, int] = {}
        self.twin = [twin_of.setdefault((frozenset(pred[v]), frozenset(succ[v])), v) for v in range(n)]
        self.best: tuple | None = None
        self.leaves: dict[tuple, list[int]] = {}
        self.automorphisms: list[list[int]] = []

    def leaf_key(self, colors):
        return tuple(sorted((colors[u], colors[v]) for u, v in self.edges))

    def orbits_fixing(self, prefix):
        n = len(self.pred)
        parent = list(range(n))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for gamma in self.automorphisms:
            if all(gamma[p] == p for p in prefix):
                for v in range(n):
                    a, b = find(v), find(gamma[v])
                    if a != b:
                        parent[max(a, b)] = min(a, b)
        return find

    def run(self, colors, prefix):
        n = len(colors)
        cells: dict[int, list[int]] = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        if len(cells) == n:
            key = self.leaf_key(colors)
            order = sorted(range(n), key=lambda v: colors[v])
            if key in self.leaves:
                first = self.leaves[key]
                gamma = [0] * n
                for a, b in zip(first, order):
                    gamma[a] = b
                self.automorphisms.append(gamma)
            else:
                self.leaves[key] = order
            if self.best is None or key < self.best:
                self.best = key
            return
        target = min((len(vs), c) for c, vs in cells.items() if len(vs) > 1)[1]
        explored: list[int] = []
        seen_twins = set()
        for v in cells[target]:
            if self.twin[v] in seen_twins:
                continue
            if explored:
                find = self.orbits_fixing(prefix)
                if any(find(v) == find(u) for u in explored):
                    continue
            seen_twins.add(self.twin[v])
            explored.append(v)
            nxt = [2 * c + (0 if u == v else 1) for u, c in enumerate(colors)]
            self.run(_refine(nxt, self.pred, self.succ), prefix + [v])


def _component_key(nodes: list[int], pred_all, succ_all, levels) -> str:
    local = {v: i for i, v in enumerate(nodes)}
    pred = [[local[u] for u in pred_all[v]] for v in nodes]
    succ = [[local[w] for w in succ_all[v]] for v in nodes]
    edges = [(local[v], local[w]) for v in nodes for w in succ_all[v]]
    init = [(levels[v], len(pred_all[v]), len(succ_all[v])) for v in nodes]
    rank = {s: i for i, s in enumerate(sorted(set(init)))}
    colors = _refine([rank[s] for s in init], pred, succ)
    search = _Search(pred, succ, edges)
    search.run(colors, [])
    body = ";".join(f"{a},{b}" for a, b in search.best)
    return f"{len(nodes)}:{body}"


def canonical_form(graph: JobGraph) -> str:
    """Relabeling-invariant structural key; node attributes are ignored."""
    n = graph.n
    pred: list[list[int]] = [[] for _ in range(n)]
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, j in graph.edge_index():
        succ[i].append(j)
        pred[j].append(i)
    levels = topological_levels(graph)
    keys = sorted(_component_key(comp, pred, succ, levels) for comp in weak_components(graph))
    return "|".join(keys)


def to_networkx(graph: JobGraph) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(graph.ids())
    g.add_edges_from(graph.edges)
    return g


def are_isomorphic(a: JobGraph, b: JobGraph) -> bool:
    if a.n != b.n or len(a.edges) != len(b.edges):
        return False
    return nx.is_isomorphic(to_networkx(a), to_networkx(b))


@dataclass
class IsoGroup:
    canonical_key: str
    members: list[tuple[str, float]] = field(default_factory=list)


def group_isomorphic(jobs: Sequence[JobGraph], keys: Sequence[str] | None = None) -> list[IsoGroup]:
    """Bucket jobs by canonical key, in order of first appearance."""
    if keys is None:
        keys = [canonical_form(j) for j in jobs]
    groups: dict[str, IsoGroup] = {}
    first: dict[str, JobGraph] = {}
    for job, key in zip(jobs, keys):
        if key not in groups:
            groups[key] = IsoGroup(key)
            first[key] = job
        groups[key].members.append((job.job_name, float(job_start(job))))
    by_name = {j.job_name: j for j in jobs}
    for key, grp in groups.items():
        if len(grp.members) > 1:
            other = by_name[grp.members[1][0]]
            if not are_isomorphic(first[key], other):
                raise InvariantError(
                    f"canonical key collision between {first[key].job_name} and {other.job_name}"
                )
    return list(groups.values())


def gap_matches(gap: float, period: float, tolerance: float = TOLERANCE, strict: bool = False) -> bool:
    """True if ``gap`` lies within tolerance of k * period for some k >= 1."""
    ks = [1] if strict else {max(1, int(np.floor(gap / period))), max(1, int(np.ceil(gap / period)))}
    return any(abs(gap - k * period) <= tolerance * k * period + 1e-9 for k in ks)


def periodic_clusters(group: IsoGroup, periods: Sequence[float] = PERIODS,
                      tolerance: float = TOLERANCE, strict: bool = False):
    """Split an isomorphism group into runs of periodic start times.

    Returns ``(clusters, leftovers)``: lists of member job names.
    """
    remaining = sorted(group.members, key=lambda m: (m[1], m[0]))
    clusters: list[list[str]] = []
    for period in periods:
        if len(remaining) < 2:
            break
        runs: list[list[tuple[str, float]]] = [[remaining[0]]]
        for prev, cur in zip(remaining, remaining[1:]):
            if gap_matches(cur[1] - prev[1], period, tolerance, strict):
                runs[-1].append(cur)
            else:
                runs.append([cur])
        left = []
        for run in runs:
            if len(run) >= 2:
                clusters.append([m[0] for m in run])
            else:
                left.extend(run)
        remaining = left
    return clusters, [m[0] for m in remaining]


def baseline_clustering(jobs: Sequence[JobGraph], periods: Sequence[float] = PERIODS,
                        tolerance: float = TOLERANCE, strict: bool = False) -> np.ndarray:
    """Label per job (input order); -1 marks jobs in no periodic cluster."""
    pos = {j.job_name: i for i, j in enumerate(jobs)}
    labels = np.full(len(jobs), -1, dtype=int)
    next_label = 0
    for grp in group_isomorphic(jobs):
        clusters, _ = periodic_clusters(grp, periods, tolerance, strict)
        for members in clusters:
            for name in members:
                labels[pos[name]] = next_label
            next_label += 1
    return labels
