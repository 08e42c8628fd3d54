"""Schedule representation: assignments of tasks to (site, start-step),
the dependency DAG over them, feasibility validation, slowdown cost, and
task embedding vectors.

A schedule is stored as a value object (`ScheduleDag`): cheap to clone,
never mutated after construction.  Rewriting produces new dags.  Edge
semantics: a task hangs off its site's root node when it starts as early
as its own constraints allow (arrival, sibling cadence, visibility-window
opening); otherwise it must start exactly when some same-site task
completes, and one edge per such predecessor is present.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ephemeris import VisibilityConstraints, visibility_masks_multi
from .scenario import Scenario

__all__ = [
    "Assignment",
    "InfeasibleAssignmentError",
    "Violation",
    "SchedulingContext",
    "ScheduleDag",
    "build_dag",
    "validate",
    "total_slowdown",
    "average_slowdown",
    "immediate_cost",
    "embed",
    "embedding_length",
    "extract_assignments",
    "earliest_feasible_start",
    "dump_schedule",
]

DEFAULT_E_MAX = 20

CONSTRAINTS = ("arrival", "deadline", "visibility", "resource", "cadence", "dependency")


class InfeasibleAssignmentError(ValueError):
    """An assignment violates a scheduling constraint."""

    def __init__(self, task_id: int, site_index: int, step: int, constraint: str):
        self.task_id = task_id
        self.site_index = site_index
        self.step = step
        self.constraint = constraint
        super().__init__(
            f"infeasible assignment: {constraint} "
            f"(task {task_id}, site {site_index}, step {step})"
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    task_id: int | None
    message: str


@dataclass(frozen=True)
class Assignment:
    task_id: int
    site_index: int
    start_step: int


class SchedulingContext:
    """Precomputed per-scenario tables: task arrays and visibility physics.

    Built once per (scenario, constraints) and shared by every dag over
    that scenario; read-only after construction.
    """

    def __init__(self, scenario: Scenario, constraints: VisibilityConstraints):
        self.scenario = scenario
        self.constraints = constraints
        self.horizon = scenario.grid.horizon_steps
        self.n_sites = len(scenario.sites)
        self.n_filters = scenario.num_filters
        n = len(scenario.tasks)
        self.n_tasks = n

        self.task_id = np.array([t.id for t in scenario.tasks], dtype=np.int64)
        self.row_of = {int(tid): r for r, tid in enumerate(self.task_id)}
        self.arrival = np.array([t.arrival for t in scenario.tasks], dtype=np.int64)
        self.exposure = np.array([t.exposure for t in scenario.tasks], dtype=np.int64)
        self.deadline = np.array([t.deadline for t in scenario.tasks], dtype=np.int64)
        self.limit = np.minimum(self.deadline, self.horizon)  # latest completion
        self.rho = np.array([t.rho for t in scenario.tasks], dtype=bool).reshape(
            n, self.n_filters
        )
        self.rho_idx = [np.flatnonzero(self.rho[r]) for r in range(n)]

        tgt_row = {t.id: i for i, t in enumerate(scenario.targets)}
        self.target_row = np.array(
            [tgt_row[t.target_id] for t in scenario.tasks], dtype=np.int64
        )
        # previous sibling (same target, seq_index - 1) and the minimum idle
        # gap required after it completes (0 for exposure-count mode)
        self.prev_sibling = np.full(n, -1, dtype=np.int64)
        self.sibling_gap = np.zeros(n, dtype=np.int64)
        by_target: dict[tuple[int, int], int] = {}
        for r, t in enumerate(scenario.tasks):
            by_target[(t.target_id, t.seq_index)] = r
        for r, t in enumerate(scenario.tasks):
            prev = by_target.get((t.target_id, t.seq_index - 1))
            if prev is not None:
                self.prev_sibling[r] = prev
                self.sibling_gap[r] = scenario.target_by_id(t.target_id).mode.sibling_gap

        # visibility per (target, site): step mask, airmass, and for every
        # step the start of its visible run / first invisible step after it
        nt, ns, h = len(scenario.targets), self.n_sites, self.horizon
        self.mask = np.zeros((nt, ns, h), dtype=bool)
        self.air = np.full((nt, ns, h), np.inf)
        self.run_start = np.full((nt, ns, h), -1, dtype=np.int64)
        self.vis_until = np.zeros((nt, ns, h), dtype=np.int64)
        if nt:
            ra = np.array([t.coord.ra for t in scenario.targets])
            dec = np.array([t.coord.dec for t in scenario.targets])
            idx = np.arange(h)
            for si, site in enumerate(scenario.sites):
                m, am = visibility_masks_multi(ra, dec, site.coord, scenario.grid, constraints)
                self.mask[:, si] = m
                self.air[:, si] = am
                inv = np.where(~m, idx[None, :], h)
                self.vis_until[:, si] = np.minimum.accumulate(inv[:, ::-1], axis=1)[:, ::-1]
                prev_inv = np.maximum.accumulate(np.where(~m, idx[None, :], -1), axis=1)
                self.run_start[:, si] = np.where(m, prev_inv + 1, -1)

    @classmethod
    def for_scenario(
        cls, scenario: Scenario, constraints: VisibilityConstraints | None = None
    ) -> "SchedulingContext":
        return cls(scenario, constraints or VisibilityConstraints())

    # -- static feasibility of one task at (site, start), other tasks aside --

    def fits_statically(self, row: int, site: int, start: int) -> str | None:
        """Name of the violated static constraint, or None if ok."""
        e = int(self.exposure[row])
        if start < self.arrival[row]:
            return "arrival"
        if start + e > self.limit[row]:
            return "deadline"
        tr = int(self.target_row[row])
        if start >= self.horizon or not self.mask[tr, site, start]:
            return "visibility"
        if self.vis_until[tr, site, start] < start + e:
            return "visibility"
        return None


def earliest_feasible_start(
    ctx: SchedulingContext,
    profile: np.ndarray,
    row: int,
    site: int,
    lo: int,
) -> int | None:
    """Earliest start >= lo where the task fits: inside one visibility
    window, completing by min(deadline, horizon), with all its filters
    free on the site for the whole exposure.  Sibling-cadence bounds must
    be folded into ``lo`` by the caller.  Returns None when nothing fits.
    """
    e = int(ctx.exposure[row])
    lo = max(int(lo), int(ctx.arrival[row]))
    hi = int(ctx.limit[row]) - e
    if hi < lo:
        return None
    tr = int(ctx.target_row[row])
    tmask = ctx.mask[tr, site, lo : hi + 1]
    if not tmask.any():
        return None
    vu = ctx.vis_until[tr, site, lo : hi + 1]
    occ = profile[site][ctx.rho_idx[row]]
    occ_any = occ.max(axis=0) if occ.shape[0] > 1 else occ[0]
    csum = np.concatenate(([0], np.cumsum(occ_any, dtype=np.int64)))
    b = np.arange(lo, hi + 1)
    ok = tmask & (vu >= b + e) & (csum[b + e] - csum[b] == 0)
    pos = np.flatnonzero(ok)
    if pos.size == 0:
        return None
    return int(lo + pos[0])


class ScheduleDag:
    """Immutable schedule over a subset of a scenario's tasks.

    Node ids: 0..n_sites-1 are the per-site root nodes, n_sites+i is the
    i-th scheduled task in ascending task-id order.  ``parents[node]``
    lists the dependency parents of each task node (empty for roots).
    """

    __slots__ = (
        "ctx",
        "rows",
        "site",
        "start",
        "eta",
        "parents",
        "profile",
        "node_of_task",
    )

    def __init__(self, ctx, rows, site, start, eta, parents, profile):
        self.ctx = ctx
        self.rows = rows
        self.site = site
        self.start = start
        self.eta = eta
        self.parents = parents
        self.profile = profile
        self.node_of_task = {
            int(ctx.task_id[r]): ctx.n_sites + i for i, r in enumerate(rows)
        }

    # -- structure ----------------------------------------------------------

    @property
    def scenario(self) -> Scenario:
        return self.ctx.scenario

    @property
    def n_sites(self) -> int:
        return self.ctx.n_sites

    @property
    def n_nodes(self) -> int:
        return self.ctx.n_sites + len(self.rows)

    @property
    def task_ids(self) -> list[int]:
        return [int(self.ctx.task_id[r]) for r in self.rows]

    def completion(self) -> np.ndarray:
        return self.start + self.ctx.exposure[self.rows]

    def assignment_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, site, start) copies, suitable for editing and rebuilding."""
        return self.rows.copy(), self.site.copy(), self.start.copy()

    def total_slowdown(self) -> float:
        return float(self.eta.sum())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScheduleDag)
            and self.ctx.scenario is other.ctx.scenario
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.site, other.site)
            and np.array_equal(self.start, other.start)
        )


def _effective_release(ctx, start_by_row: dict[int, int], row: int, site: int, b: int):
    """Earliest start the task's own constraints allow around step b:
    max(arrival, previous-sibling completion + gap, containing-window start)."""
    rel = int(ctx.arrival[row])
    prev = int(ctx.prev_sibling[row])
    if prev >= 0 and prev in start_by_row:
        rel = max(rel, start_by_row[prev] + int(ctx.exposure[prev]) + int(ctx.sibling_gap[row]))
    ws = int(ctx.run_start[int(ctx.target_row[row]), site, b]) if b < ctx.horizon else -1
    return max(rel, ws)


def _build(ctx: SchedulingContext, rows: np.ndarray, site: np.ndarray, start: np.ndarray):
    """Core constructor: validates every constraint and derives edges.

    Raises InfeasibleAssignmentError on the first violation found.
    """
    order = np.argsort(ctx.task_id[rows], kind="stable")
    rows = np.asarray(rows, dtype=np.int64)[order]
    site = np.asarray(site, dtype=np.int64)[order]
    start = np.asarray(start, dtype=np.int64)[order]
    n = len(rows)

    if len(set(rows.tolist())) != n:
        raise ValueError("duplicate task in assignments")

    profile = np.zeros((ctx.n_sites, ctx.n_filters, ctx.horizon), dtype=np.uint8)
    start_by_row = {int(r): int(b) for r, b in zip(rows, start)}

    for i in range(n):
        r, s, b = int(rows[i]), int(site[i]), int(start[i])
        tid = int(ctx.task_id[r])
        if not 0 <= s < ctx.n_sites:
            raise InfeasibleAssignmentError(tid, s, b, "dependency")
        bad = ctx.fits_statically(r, s, b)
        if bad is not None:
            raise InfeasibleAssignmentError(tid, s, b, bad)
        e = int(ctx.exposure[r])
        block = profile[s][ctx.rho_idx[r], b : b + e]
        if block.any():
            step = b + int(np.argmax(block.max(axis=0) > 0))
            raise InfeasibleAssignmentError(tid, s, step, "resource")
        profile[s][ctx.rho_idx[r], b : b + e] = 1
        prev = int(ctx.prev_sibling[r])
        if prev >= 0 and prev in start_by_row:
            release = start_by_row[prev] + int(ctx.exposure[prev]) + int(ctx.sibling_gap[r])
            if b < release:
                raise InfeasibleAssignmentError(tid, s, b, "cadence")

    # dependency edges: completions per site -> starts
    comp_map: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        c = int(start[i]) + int(ctx.exposure[int(rows[i])])
        comp_map.setdefault((int(site[i]), c), []).append(ctx.n_sites + i)

    parents: list[tuple[int, ...]] = [() for _ in range(ctx.n_sites)]
    eta = np.empty(n, dtype=np.float64)
    for i in range(n):
        r, s, b = int(rows[i]), int(site[i]), int(start[i])
        e = int(ctx.exposure[r])
        eta[i] = (b + e - ctx.arrival[r]) / e
        p: list[int] = []
        if b == _effective_release(ctx, start_by_row, r, s, b):
            p.append(s)  # root edge: starts as early as its own constraints allow
        p.extend(q for q in comp_map.get((s, b), ()) if q != ctx.n_sites + i)
        if not p:
            # no predecessor completes at B (e.g. a rewrite vacated the slot
            # before it); the task still hangs off its site root
            p.append(s)
        parents.append(tuple(sorted(p)))

    return ScheduleDag(ctx, rows, site, start, eta, tuple(parents), profile)


def build_dag(
    scenario: Scenario,
    assignments: Iterable[Assignment],
    constraints: VisibilityConstraints | None = None,
    *,
    ctx: SchedulingContext | None = None,
) -> ScheduleDag:
    """Construct and fully validate a schedule DAG from assignments."""
    ctx = ctx or SchedulingContext.for_scenario(scenario, constraints)
    assignments = list(assignments)
    rows = np.empty(len(assignments), dtype=np.int64)
    site = np.empty(len(assignments), dtype=np.int64)
    start = np.empty(len(assignments), dtype=np.int64)
    for i, a in enumerate(assignments):
        if a.task_id not in ctx.row_of:
            raise ValueError(f"assignment references unknown task {a.task_id}")
        rows[i] = ctx.row_of[a.task_id]
        site[i] = a.site_index
        start[i] = a.start_step
    return _build(ctx, rows, site, start)


def build_from_arrays(ctx, rows, site, start) -> ScheduleDag:
    """Array fast path used by schedulers and the rewriter."""
    return _build(ctx, rows, site, start)


def extract_assignments(dag: ScheduleDag) -> list[Assignment]:
    return [
        Assignment(int(dag.ctx.task_id[r]), int(s), int(b))
        for r, s, b in zip(dag.rows, dag.site, dag.start)
    ]


def validate(dag: ScheduleDag) -> list[Violation]:
    """Re-derive every invariant from scratch; empty list iff feasible.

    Checks static constraints, capacity, cadence, slowdown cache, edge
    rules, the at-least-one-parent rule, and acyclicity of the stored
    edges (hand-built dags can carry arbitrary edge lists).
    """
    ctx = dag.ctx
    out: list[Violation] = []
    n = len(dag.rows)
    start_by_row = {int(r): int(b) for r, b in zip(dag.rows, dag.start)}

    profile = np.zeros((ctx.n_sites, ctx.n_filters, ctx.horizon), dtype=np.int16)
    for i in range(n):
        r, s, b = int(dag.rows[i]), int(dag.site[i]), int(dag.start[i])
        tid = int(ctx.task_id[r])
        bad = ctx.fits_statically(r, s, b)
        if bad is not None:
            out.append(Violation(bad, tid, f"task {tid} fails {bad} at site {s} step {b}"))
            continue
        profile[s][ctx.rho_idx[r], b : b + int(ctx.exposure[r])] += 1
        prev = int(ctx.prev_sibling[r])
        if prev >= 0 and prev in start_by_row:
            release = start_by_row[prev] + int(ctx.exposure[prev]) + int(ctx.sibling_gap[r])
            if b < release:
                out.append(Violation("cadence", tid, f"task {tid} starts before sibling release"))
        e = int(ctx.exposure[r])
        eta = (b + e - int(ctx.arrival[r])) / e
        if abs(eta - float(dag.eta[i])) > 1e-12:
            out.append(Violation("dependency", tid, f"task {tid} cached slowdown mismatch"))

    if (profile > 1).any():
        ss, ff, tt = np.nonzero(profile > 1)
        out.append(
            Violation(
                "resource",
                None,
                f"capacity exceeded at site {ss[0]} filter {ff[0]} step {tt[0]}",
            )
        )

    # expected edges and the >=1 parent rule
    comp_map: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        c = int(dag.start[i]) + int(ctx.exposure[int(dag.rows[i])])
        comp_map.setdefault((int(dag.site[i]), c), []).append(ctx.n_sites + i)
    for i in range(n):
        r, s, b = int(dag.rows[i]), int(dag.site[i]), int(dag.start[i])
        tid = int(ctx.task_id[r])
        want: list[int] = []
        if b < ctx.horizon and dag.ctx.mask[int(ctx.target_row[r]), s, b]:
            if b == _effective_release(ctx, start_by_row, r, s, b):
                want.append(s)
        want.extend(q for q in comp_map.get((s, b), ()) if q != ctx.n_sites + i)
        if not want:
            want.append(s)  # root fallback, same rule as the constructor
        have = tuple(dag.parents[ctx.n_sites + i]) if ctx.n_sites + i < len(dag.parents) else ()
        if sorted(set(want)) != sorted(set(have)):
            out.append(Violation("dependency", tid, f"task {tid} edge set mismatch"))
        if not have:
            out.append(Violation("dependency", tid, f"task {tid} has no incoming edge"))

    # cycle check on the stored edges
    state = [0] * dag.n_nodes  # 0 unvisited, 1 on stack, 2 done
    def walk(v: int) -> bool:
        stack = [(v, iter(dag.parents[v] if v < len(dag.parents) else ()))]
        state[v] = 1
        while stack:
            node, it = stack[-1]
            adv = next(it, None)
            if adv is None:
                state[node] = 2
                stack.pop()
                continue
            if state[adv] == 1:
                return True
            if state[adv] == 0:
                state[adv] = 1
                stack.append((adv, iter(dag.parents[adv] if adv < len(dag.parents) else ())))
        return False

    for v in range(dag.n_nodes):
        if state[v] == 0 and walk(v):
            out.append(Violation("cycle", None, "dependency edges contain a cycle"))
            break

    return out


def total_slowdown(dag: ScheduleDag) -> float:
    """Sum of per-task slowdowns (B + E - A) / E over scheduled tasks."""
    return float(dag.eta.sum())


def average_slowdown(dag: ScheduleDag, *, tasks: str = "scheduled") -> float:
    """Mean task slowdown; every term is >= 1 on a feasible dag.

    ``tasks="all"`` demands that the dag covers the whole scenario and
    raises (listing the missing ids) when it does not.
    """
    if tasks == "all":
        missing = sorted(set(int(t) for t in dag.ctx.task_id) - set(dag.task_ids))
        if missing:
            raise ValueError(f"unassigned tasks: {missing}")
    if len(dag.rows) == 0:
        raise ValueError("average slowdown of an empty schedule is undefined")
    return float(dag.eta.mean())


def immediate_cost(dag_before: ScheduleDag, dag_after: ScheduleDag) -> float:
    """Cost delta of a rewrite: total slowdown before minus after
    (positive means the rewrite improved the schedule)."""
    if sorted(dag_before.task_ids) != sorted(dag_after.task_ids):
        raise ValueError("immediate cost requires identical task sets")
    return total_slowdown(dag_before) - total_slowdown(dag_after)


def embedding_length(n_filters: int, e_max: int, n_sites: int = 1, distributed: bool = False) -> int:
    if distributed:
        return n_sites * n_filters * (e_max + 1) + 1
    return n_filters * (e_max + 1) + 1


def embed(
    dag: ScheduleDag,
    task_id: int,
    distributed: bool = False,
    *,
    e_max: int = DEFAULT_E_MAX,
) -> np.ndarray:
    """Feature vector of one scheduled task.

    Layout: the filter demand (placed in its site's block in distributed
    mode), then one resource-utilization snapshot per execution step,
    zero padding up to ``e_max`` snapshots, and the task's current
    slowdown as the final entry.
    """
    ctx = dag.ctx
    node = dag.node_of_task[task_id]
    i = node - ctx.n_sites
    r, s, b = int(dag.rows[i]), int(dag.site[i]), int(dag.start[i])
    e = int(ctx.exposure[r])
    if e > e_max:
        raise ValueError(f"task exposure {e} exceeds e_max {e_max}")
    d = ctx.n_filters
    if distributed:
        width = ctx.n_sites * d
        head = np.zeros(width)
        head[s * d : (s + 1) * d] = ctx.rho[r]
        snaps = dag.profile[:, :, b : b + e].transpose(2, 0, 1).reshape(e, width)
    else:
        width = d
        head = ctx.rho[r].astype(np.float64)
        snaps = dag.profile[s, :, b : b + e].T
    vec = np.zeros(width * (e_max + 1) + 1)
    vec[:width] = head
    vec[width : width + e * width] = snaps.ravel()
    vec[-1] = dag.eta[i]
    return vec


def embedding_matrix(
    dag: ScheduleDag, distributed: bool = False, *, e_max: int = DEFAULT_E_MAX
) -> np.ndarray:
    """Embeddings for every node, root rows all-zero, task rows per embed()."""
    d_in = embedding_length(dag.ctx.n_filters, e_max, dag.ctx.n_sites, distributed)
    out = np.zeros((dag.n_nodes, d_in))
    for tid in dag.task_ids:
        out[dag.node_of_task[tid]] = embed(dag, tid, distributed, e_max=e_max)
    return out


def dump_schedule(dag: ScheduleDag, fh) -> None:
    """One JSON line per assignment: {task_id, site, start, slowdown}."""
    for i, r in enumerate(dag.rows):
        fh.write(
            json.dumps(
                {
                    "task_id": int(dag.ctx.task_id[r]),
                    "site": int(dag.site[i]),
                    "start": int(dag.start[i]),
                    "slowdown": float(dag.eta[i]),
                }
            )
            + "\n"
        )
