"""Reading batch_task tables and turning them into cleaned job DAGs."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, IngestError
from .graph import JobGraph, TaskNode, is_dag, job_runtime

COLUMNS = (
    "task_name",
    "instance_num",
    "job_name",
    "task_type",
    "status",
    "start_time",
    "end_time",
    "plan_cpu",
    "plan_mem",
)

# rule letter -> reason key used in drop counts
RULES = {
    "a": "status",
    "b": "undefined_values",
    "c": "invalid_dag",
    "d": "too_few_tasks",
    "e": "runtime",
}

_TASK_NAME = re.compile(r"^[A-Za-z]+(\d+(?:_\d+)*)$")


@dataclass
class TaskRecord:
    task_name: str
    instance_num: int
    job_name: str
    task_type: str
    status: str
    start_time: int
    end_time: int
    plan_cpu: float
    plan_mem: float


@dataclass
class Rejection:
    line: int
    reason: str
    job_name: str = ""
    raw: list[str] = field(default_factory=list)


@dataclass
class IngestConfig:
    min_tasks: int = 10
    max_runtime_s: int = 3600
    required_status: str = "Terminated"
    column_map: tuple[str, ...] = COLUMNS

    def __post_init__(self):
        if self.min_tasks < 1:
            raise ConfigError("min_tasks must be >= 1")
        if self.max_runtime_s <= 0:
            raise ConfigError("max_runtime_s must be > 0")
        self.column_map = tuple(self.column_map)
        if sorted(self.column_map) != sorted(COLUMNS):
            raise ConfigError(f"column_map must assign each of {COLUMNS} exactly once")


def _parse_row(row: list[str], cmap: Sequence[str]) -> TaskRecord:
    vals = dict(zip(cmap, (c.strip() for c in row)))
    for key in ("task_name", "job_name", "status", "start_time", "end_time", "plan_cpu", "plan_mem", "instance_num"):
        if vals[key] == "":
            raise ValueError("undefined value")
    try:
        start = int(float(vals["start_time"]))
        end = int(float(vals["end_time"]))
        cpu = float(vals["plan_cpu"])
        mem = float(vals["plan_mem"])
        inst = int(float(vals["instance_num"]))
    except ValueError:
        raise ValueError("unparseable value") from None
    if not all(math.isfinite(v) for v in (cpu, mem)):
        raise ValueError("unparseable value")
    # zero cpu has no meaning in the trace; treated like a missing plan
    if cpu <= 0:
        raise ValueError("undefined value")
    if not 0 <= mem <= 100:
        raise ValueError("plan_mem out of range")
    if inst < 1:
        raise ValueError("undefined value")
    if start and end and end < start:
        raise ValueError("end before start")
    return TaskRecord(vals["task_name"], inst, vals["job_name"], vals["task_type"],
                      vals["status"], start, end, cpu, mem)


def parse_task_table(stream, column_map: Sequence[str] = COLUMNS) -> tuple[list[TaskRecord], list[Rejection]]:
    """Parse a batch_task CSV (headered or not).

    ``stream`` may be a binary or text file object. A first row that lists
    the column roles is treated as a header and overrides ``column_map``.
    """
    try:
        data = stream.read()
    except OSError as exc:
        raise IngestError(f"cannot read task table: {exc}") from exc
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestError(f"task table is not utf-8 text: {exc}") from exc
    cmap = tuple(column_map)
    if sorted(cmap) != sorted(COLUMNS):
        raise IngestError(f"column map must assign all of {COLUMNS}")

    records: list[TaskRecord] = []
    rejected: list[Rejection] = []
    reader = csv.reader(io.StringIO(data))
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        cells = [c.strip() for c in row]
        if lineno == 1 and set(cells) == set(COLUMNS):
            cmap = tuple(cells)
            continue
        if len(row) != len(cmap):
            rejected.append(Rejection(lineno, "wrong column count", "", row))
            continue
        try:
            records.append(_parse_row(row, cmap))
        except ValueError as exc:
            job = cells[cmap.index("job_name")]
            rejected.append(Rejection(lineno, str(exc), job, row))
    return records, rejected


def parse_task_name(name: str) -> tuple[int, list[int]] | None:
    """``"R3_1_2"`` -> ``(3, [1, 2])``; None for names outside the grammar."""
    m = _TASK_NAME.match(name)
    if m is None:
        return None
    parts = [int(p) for p in m.group(1).split("_")]
    return parts[0], parts[1:]


def build_job_graphs(records: Iterable[TaskRecord], rejected: Iterable[Rejection] = ()) -> list[JobGraph]:
    """Group records by job and reconstruct each job's DAG from task names.

    Jobs appear in order of first occurrence. Jobs with a rejected row are
    flagged "undefined value" so cleaning removes them.
    """
    by_job: dict[str, list[TaskRecord]] = {}
    for r in records:
        by_job.setdefault(r.job_name, []).append(r)
    bad_jobs = {r.job_name for r in rejected if r.job_name}

    graphs = []
    for job, recs in by_job.items():
        parsed = [parse_task_name(r.task_name) for r in recs]
        flags: list[str] = []
        taken = [p[0] for p in parsed if p is not None]
        if len(taken) != len(set(taken)):
            flags.append("duplicate id")
        next_free = max(taken, default=0) + 1
        nodes = []
        edges: list[tuple[int, int]] = []
        for r, p in zip(recs, parsed):
            if p is None:
                tid, parents = next_free, []
                next_free += 1
            else:
                tid, parents = p
            nodes.append(TaskNode(tid, r.plan_cpu, r.plan_mem, float(r.instance_num),
                                  r.start_time, r.end_time, r.task_name, r.status))
            edges.extend((parent, tid) for parent in parents)
        known = {t.task_id for t in nodes}
        dangling = [e for e in edges if e[0] not in known]
        if dangling:
            flags.append("dangling dependency")
            edges = [e for e in edges if e[0] in known]
        if len(edges) != len(set(edges)) or any(u == v for u, v in edges):
            flags.append("malformed edges")
            edges = sorted({e for e in edges if e[0] != e[1]})
        if job in bad_jobs:
            flags.append("undefined value")
        graphs.append(JobGraph(job, nodes, edges, flags))
    for job in sorted(bad_jobs - set(by_job)):
        graphs.append(JobGraph(job, [], [], ["undefined value"]))
    return graphs


@dataclass
class CleanReport:
    input_jobs: int
    kept: int
    dropped: dict[str, int]

    def to_dict(self) -> dict:
        return {"input_jobs": self.input_jobs, "kept": self.kept, "dropped": dict(self.dropped)}


def drop_reason(job: JobGraph, cfg: IngestConfig) -> str | None:
    """First cleaning rule (a..e, in order) that ``job`` violates, or None."""
    if not job.nodes:
        return RULES["b"]
    if any(t.status != cfg.required_status for t in job.nodes):
        return RULES["a"]
    if "undefined value" in job.flags or any(
        not t.start_time or not t.end_time for t in job.nodes
    ):
        return RULES["b"]
    if "dangling dependency" in job.flags or "duplicate id" in job.flags \
            or "malformed edges" in job.flags or not is_dag(job):
        return RULES["c"]
    if job.n < cfg.min_tasks:
        return RULES["d"]
    rt = job_runtime(job)
    if not 0 < rt <= cfg.max_runtime_s:
        return RULES["e"]
    return None


def clean_jobs(jobs: Sequence[JobGraph], cfg: IngestConfig) -> tuple[list[JobGraph], CleanReport]:
    kept = []
    dropped = Counter({reason: 0 for reason in RULES.values()})
    for job in jobs:
        reason = drop_reason(job, cfg)
        if reason is None:
            kept.append(job)
        else:
            dropped[reason] += 1
    return kept, CleanReport(len(jobs), len(kept), dict(dropped))


def stratified_split(jobs: Sequence[JobGraph], test_fraction: float, n_bins: int = 10,
                     seed: int = 0, runtimes: Sequence[float] | None = None):
    """Runtime-stratified split into (train, test), both in input order."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if runtimes is None:
        runtimes = [job_runtime(j) for j in jobs]
    order = sorted(range(len(jobs)), key=lambda i: (runtimes[i], jobs[i].job_name))
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for chunk in np.array_split(np.array(order, dtype=int), min(n_bins, max(len(jobs), 1))):
        if len(chunk) == 0:
            continue
        # guard against 0.2 * 150 = 30.000000000000004
        take = math.ceil(test_fraction * len(chunk) - 1e-9)
        picked = rng.permutation(chunk)[:take]
        test_idx.update(int(i) for i in picked)
    train = [j for i, j in enumerate(jobs) if i not in test_idx]
    test = [j for i, j in enumerate(jobs) if i in test_idx]
    return train, test


def write_task_table(fh, jobs: Iterable[JobGraph], header: bool = False) -> None:
    """Write jobs back out as batch_task rows (text file object)."""
    w = csv.writer(fh)
    if header:
        w.writerow(COLUMNS)
    for job in jobs:
        for t in job.nodes:
            w.writerow([t.name, int(t.instance_num), job.job_name, "1", t.status, int(t.start_time),
                        int(t.end_time), repr(float(t.plan_cpu)), repr(float(t.plan_mem))])
