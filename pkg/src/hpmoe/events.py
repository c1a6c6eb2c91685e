"""Tile dependency graph and event-counter synthesis.

Tasks are addressed by ``(rank, index)`` where ``index`` is the position in
that rank's TD array.  Counters live on the consumer's rank; a producer's
``trigger_events`` refer to counters on ``td.trigger_rank`` (its own rank, or
the destination rank for PutMemSignal tasks).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import networkx as nx

from .errors import UncoveredRegion
from .graph import ODG
from .tasks import GATHER, SCATTER, TaskDescriptor, TensorSlice, with_events

Uid = tuple[int, int]


@dataclass(frozen=True)
class EventCounter:
    id: int
    threshold: int
    initial_value: int = 0


@dataclass
class EventTable:
    counters: dict[int, EventCounter] = field(default_factory=dict)
    waiter_of: dict[int, set[int]] = field(default_factory=dict)
    triggered_by: dict[int, list[Uid]] = field(default_factory=dict)
    # producers left with several counters because merging would deadlock
    unmerged_producers: list[Uid] = field(default_factory=list)

    def to_list(self) -> list[dict]:
        return [{"id": c.id, "threshold": c.threshold} for c in
                sorted(self.counters.values(), key=lambda c: c.id)]


@dataclass
class TileDependencyGraph:
    nodes: list[Uid]
    edges: dict[tuple[Uid, Uid], TensorSlice]

    def preds(self) -> dict[Uid, list[Uid]]:
        out: dict[Uid, list[Uid]] = {u: [] for u in self.nodes}
        for p, c in sorted(self.edges):
            out[c].append(p)
        return out

    def succs(self) -> dict[Uid, list[Uid]]:
        out: dict[Uid, list[Uid]] = {u: [] for u in self.nodes}
        for p, c in sorted(self.edges):
            out[p].append(c)
        return out


def _as_ranks(tds) -> list[list[TaskDescriptor]]:
    if tds and isinstance(tds[0], TaskDescriptor):
        return [list(tds)]
    return [list(r) for r in tds]


def _as_graphs(graphs, n) -> list[ODG]:
    if isinstance(graphs, ODG):
        return [graphs] * n
    return list(graphs)


def _full(s: TensorSlice, shape) -> TensorSlice:
    return TensorSlice(s.tensor_id, (0,) * len(shape), tuple(shape))


class _ProducerIndex:
    """Interval index over dim 0 of producer output slices for one tensor."""

    def __init__(self, items: list[tuple[TensorSlice, Uid]]):
        items.sort(key=lambda it: (it[0].offsets[0] if it[0].offsets else 0, it[1]))
        self.items = items
        self.starts = [s.offsets[0] if s.offsets else 0 for s, _ in items]
        self.max_end = []
        m = -1
        for s, _ in items:
            m = max(m, s.offsets[0] + s.extents[0] if s.offsets else 1)
            self.max_end.append(m)

    def overlapping(self, q: TensorSlice):
        lo = q.offsets[0] if q.offsets else 0
        hi = lo + (q.extents[0] if q.offsets else 1)
        i = bisect.bisect_left(self.starts, hi) - 1
        found = []
        while i >= 0 and self.max_end[i] > lo:
            s, uid = self.items[i]
            inter = s.intersection(q)
            if inter is not None:
                found.append((uid, inter))
            i -= 1
        return found


def build_tile_deps(tds, graphs) -> TileDependencyGraph:
    ranks = _as_ranks(tds)
    graphs = _as_graphs(graphs, len(ranks))
    producers: dict[tuple[int, int], list] = {}
    for r, rank_tds in enumerate(ranks):
        for i, td in enumerate(rank_tds):
            for s in td.outputs:
                key = (td.slice_rank(s), s.tensor_id)
                shape = graphs[key[0]].tensors[s.tensor_id].shape
                box = _full(s, shape) if (SCATTER in s.flags or GATHER in s.flags) else s
                if box.numel:
                    producers.setdefault(key, []).append((box, (r, i)))
    index = {k: _ProducerIndex(v) for k, v in producers.items()}
    nodes = [(r, i) for r, rank_tds in enumerate(ranks) for i in range(len(rank_tds))]
    edges: dict[tuple[Uid, Uid], TensorSlice] = {}
    for r, rank_tds in enumerate(ranks):
        g = graphs[r]
        inputs = g.graph_inputs()
        for i, td in enumerate(rank_tds):
            for s in td.inputs:
                if s.is_metadata or s.tensor_id in inputs:
                    continue
                q = _full(s, g.tensors[s.tensor_id].shape) if GATHER in s.flags else s
                if q.numel == 0:
                    continue
                hits = index.get((r, s.tensor_id))
                hits = hits.overlapping(q) if hits else []
                covered = sum(inter.numel for _, inter in hits)
                if covered < q.numel:
                    raise UncoveredRegion(
                        f"rank {r} task {i} ({td.task_type}) reads {q.numel - covered} elements "
                        f"of tensor {s.tensor_id} that no task produces")
                for uid, inter in hits:
                    if uid != (r, i):
                        edges.setdefault((uid, (r, i)), inter)
    return TileDependencyGraph(nodes, edges)


def _merge_shared_producers(dep: TileDependencyGraph, keys, groups, precedence=()):
    """Merge counters that share a producer unless the merge closes a wait cycle.

    A merged counter makes every waiter wait for every producer of the union,
    so it is legal only if no waiter already precedes one of those producers.
    """
    wait = nx.DiGraph()
    wait.add_nodes_from(dep.nodes)
    wait.add_edges_from(dep.edges)
    wait.add_edges_from(precedence)
    parent = list(range(len(keys)))
    members = {gi: (set(ps), set(groups[(r, ps)])) for gi, (r, ps) in enumerate(keys)}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict[Uid, int] = {}
    unmerged: set[Uid] = set()
    for gi, (rank, ps) in enumerate(keys):
        for p in sorted(ps):
            if p not in owner:
                owner[p] = gi
                continue
            a, b = find(owner[p]), find(gi)
            if a == b:
                continue
            if keys[a][0] != keys[b][0]:
                unmerged.add(p)
                continue
            prods = members[a][0] | members[b][0]
            waiters = members[a][1] | members[b][1]
            if any(w in prods or prods & nx.descendants(wait, w) for w in waiters):
                unmerged.add(p)
                continue
            wait.add_edges_from((q, w) for q in prods for w in waiters)
            lo, hi = min(a, b), max(a, b)
            parent[hi] = lo
            members[lo] = (prods, waiters)
    roots = sorted({find(gi) for gi in range(len(keys))})
    counters = [(keys[r][0], frozenset(members[r][0]), sorted(members[r][1])) for r in roots]
    # a producer is unmerged only if it still ends up triggering several counters
    count: dict[Uid, int] = {}
    for _, ps, _ in counters:
        for p in ps:
            count[p] = count.get(p, 0) + 1
    return counters, {p for p in unmerged if count.get(p, 0) > 1}


def assign_events(dep: TileDependencyGraph, tds, strict_single_trigger: bool = False,
                  precedence=()):
    """Allocate one counter per distinct producer set; return (tables, tds).

    With ``strict_single_trigger`` every producer triggers exactly one counter:
    counters sharing a producer are merged and their waiters wait for the
    union of producers.  A merge that would close a cycle with the tile
    edges or the extra ``precedence`` edges (e.g. queue order) is skipped.
    """
    ranks = _as_ranks(tds)
    preds = dep.preds()
    # groups: (rank, producer frozenset) -> waiters
    groups: dict[tuple[int, frozenset], list[Uid]] = {}
    for uid in sorted(preds):
        ps = preds[uid]
        if ps:
            groups.setdefault((uid[0], frozenset(ps)), []).append(uid)
    keys = sorted(groups, key=lambda k: min(groups[k]))
    unmerged: set[Uid] = set()
    if strict_single_trigger:
        counters, unmerged = _merge_shared_producers(dep, keys, groups, precedence)
    else:
        counters = [(k[0], k[1], groups[k]) for k in keys]

    tables = [EventTable() for _ in ranks]
    for p in unmerged:
        tables[p[0]].unmerged_producers.append(p)
    dependent: dict[Uid, int] = {}
    triggers: dict[Uid, set[int]] = {}
    next_id = [0] * len(ranks)
    for rank, ps, waiters in counters:
        cid = next_id[rank]
        next_id[rank] += 1
        t = tables[rank]
        t.counters[cid] = EventCounter(cid, len(ps))
        t.waiter_of[cid] = {w[1] for w in waiters}
        t.triggered_by[cid] = sorted(ps)
        for w in waiters:
            dependent[w] = cid
        for p in ps:
            trig_rank = ranks[p[0]][p[1]].trigger_rank
            if trig_rank != rank:
                raise ValueError(f"task {p} cannot signal a counter on rank {rank}")
            triggers.setdefault(p, set()).add(cid)
    new_ranks = [
        [with_events(td, dependent.get((r, i)), sorted(triggers.get((r, i), ())))
         for i, td in enumerate(rank_tds)]
        for r, rank_tds in enumerate(ranks)
    ]
    return tables, new_ranks


def verify_thresholds(tds, tables, dep: TileDependencyGraph) -> list[str]:
    """Static check of the counter contract; returns violations (empty = ok)."""
    ranks = _as_ranks(tds)
    if isinstance(tables, EventTable):
        tables = [tables]
    violations = []
    trigger_count: dict[tuple[int, int], int] = {}
    for r, rank_tds in enumerate(ranks):
        for i, td in enumerate(rank_tds):
            for cid in td.trigger_events:
                key = (td.trigger_rank, cid)
                trigger_count[key] = trigger_count.get(key, 0) + 1
                if key[0] >= len(tables) or cid not in tables[key[0]].counters:
                    violations.append(f"task {(r, i)} triggers unknown counter {cid} on rank {key[0]}")
            if td.dependent_event is not None:
                if td.dependent_event not in tables[r].counters:
                    violations.append(f"task {(r, i)} waits on unknown counter {td.dependent_event}")
                elif td.dependent_event in td.trigger_events and td.trigger_rank == r:
                    violations.append(f"task {(r, i)} waits on a counter it triggers")
    for r, table in enumerate(tables):
        for cid, c in table.counters.items():
            produced = trigger_count.get((r, cid), 0)
            if c.threshold != produced or c.threshold != len(table.triggered_by.get(cid, ())):
                violations.append(
                    f"threshold({cid}@rank{r}) = {c.threshold} != producer count {produced}")
            if c.threshold < 1:
                violations.append(f"counter {cid}@rank{r} has threshold < 1")
    for (p, c) in sorted(dep.edges):
        ptd = ranks[p[0]][p[1]]
        ctd = ranks[c[0]][c[1]]
        cid = ctd.dependent_event
        if cid is None or ptd.trigger_rank != c[0] or cid not in ptd.trigger_events:
            violations.append(f"edge {p} -> {c} is not covered by any counter")
        elif c[1] not in tables[c[0]].waiter_of.get(cid, ()):
            violations.append(f"edge {p} -> {c}: consumer missing from waiters of counter {cid}")
    return violations
