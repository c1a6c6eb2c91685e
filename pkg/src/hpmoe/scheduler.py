"""CTQ/VTQ queue construction, legal reorderings and the SSC document."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import networkx as nx

from .errors import ParseError, VersionError
from .events import EventCounter, EventTable, Uid
from .graph import COMBINE_KINDS, DISPATCH_KINDS, ODG, OperatorKind
from .tasks import CTQ, VTQ, TaskDescriptor

SSC_VERSION = 1

INTERLEAVE_PAIRS = (
    (OperatorKind.GmmActGrad, OperatorKind.GmmW2Grad),
    (OperatorKind.GmmGateGrad, OperatorKind.GmmW1Grad),
)


class NoOpWarning(UserWarning):
    """A reordering pass found nothing to reorder."""


@dataclass(frozen=True)
class QueueSchedule:
    ctq: tuple[int, ...]
    vtq: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ctq", tuple(self.ctq))
        object.__setattr__(self, "vtq", tuple(self.vtq))

    def queue(self, name: str) -> tuple[int, ...]:
        return self.ctq if name == CTQ else self.vtq


@dataclass
class SSC:
    version: int
    shape_bucket_key: str
    rank_id: int
    tds: list[TaskDescriptor]
    events: EventTable
    queues: QueueSchedule
    tiling_metadata: list = field(default_factory=list)


def build_queues(tds: list[TaskDescriptor], dep=None) -> QueueSchedule:
    """Operator topological order, then ascending task index, split by queue type."""
    order = sorted(range(len(tds)), key=lambda i: (tds[i].tiling_data_position, tds[i].task_index, i))
    return QueueSchedule([i for i in order if tds[i].queue_type == CTQ],
                         [i for i in order if tds[i].queue_type == VTQ])


def ratr_order(rank: int, ep_size: int) -> list[int]:
    """Destination order of ``rank``: ring from rank+1, local rank last."""
    return [(rank + 1 + k) % ep_size for k in range(ep_size)]


def _comm_block(td: TaskDescriptor, ep_size: int) -> int:
    """Local-expert block of a communication task.

    Dispatch tasks are indexed ``dst * L + j`` and combine tasks ``j * P + src``;
    either way the block is the local expert ``j``.
    """
    if td.op_kind in COMBINE_KINDS:
        return td.task_index // ep_size
    local = max(td.task_split_num // ep_size, 1)
    return td.task_index % local


def apply_ratr(q: QueueSchedule, tds: list[TaskDescriptor], rank: int, ep_size: int,
               include_combine: bool = True) -> QueueSchedule:
    """Rotate the destination order of every communication phase in the VTQ.

    Each contiguous run of one communication operator is reordered expert
    block by expert block; inside a block, destinations follow the ring
    starting at ``rank + 1``.  The result is a Latin schedule: in every slot
    each destination is targeted by exactly one source.
    """
    if ep_size <= 1:
        return q
    kinds = set(DISPATCH_KINDS) | (set(COMBINE_KINDS) if include_combine else set())
    vtq = list(q.vtq)
    out: list[int] = []
    i = 0
    while i < len(vtq):
        td = tds[vtq[i]]
        if td.comm is None or td.op_kind not in kinds:
            out.append(vtq[i])
            i += 1
            continue
        j = i
        while j < len(vtq) and tds[vtq[j]].comm is not None and tds[vtq[j]].op_id == td.op_id:
            j += 1
        run = vtq[i:j]
        run.sort(key=lambda k: (_comm_block(tds[k], ep_size),
                                (tds[k].comm.dst_rank - rank - 1) % ep_size, tds[k].task_index))
        out.extend(run)
        i = j
    return QueueSchedule(q.ctq, out)


def apply_gmm_interleaving(q: QueueSchedule, tds: list[TaskDescriptor], g: ODG | None = None,
                           routing=None) -> QueueSchedule:
    """Interleave independent backward GMM branches expert by expert in the CTQ."""
    kinds_present = {tds[i].op_kind for i in q.ctq}
    pairs = [p for p in INTERLEAVE_PAIRS if p[0] in kinds_present and p[1] in kinds_present]
    if not pairs:
        warnings.warn("no independent GMM pairs to interleave", NoOpWarning, stacklevel=2)
        return q
    ctq = list(q.ctq)
    for a_kind, b_kind in pairs:
        a = sorted((i for i in ctq if tds[i].op_kind == a_kind), key=lambda i: tds[i].task_index)
        b = sorted((i for i in ctq if tds[i].op_kind == b_kind), key=lambda i: tds[i].task_index)
        merged = []
        for k in range(max(len(a), len(b))):
            if k < len(a):
                merged.append(a[k])
            if k < len(b):
                merged.append(b[k])
        members = set(merged)
        first = min(ctq.index(i) for i in members)
        rest = [i for i in ctq if i not in members]
        insert_at = sum(1 for i in ctq[:first] if i not in members)
        ctq = rest[:insert_at] + merged + rest[insert_at:]
    return QueueSchedule(ctq, q.vtq)


@dataclass
class ScheduleCheck:
    witness: list[Uid] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.witness

    def __bool__(self):
        return self.ok


def union_graph(sscs: list[SSC]) -> nx.DiGraph:
    """Queue-successor edges plus producer -> waiter event edges over all ranks."""
    G = nx.DiGraph()
    by_rank = {s.rank_id: s for s in sscs}
    for s in sscs:
        G.add_nodes_from((s.rank_id, i) for i in range(len(s.tds)))
        for queue in (s.queues.ctq, s.queues.vtq):
            for u, v in zip(queue, queue[1:]):
                G.add_edge((s.rank_id, u), (s.rank_id, v), kind="queue")
    for s in sscs:
        for i, td in enumerate(s.tds):
            target = by_rank.get(td.trigger_rank)
            if target is None:
                continue
            for cid in td.trigger_events:
                for w in sorted(target.events.waiter_of.get(cid, ())):
                    G.add_edge((s.rank_id, i), (td.trigger_rank, w), kind="event")
    return G


def _shortest_cycle(G: nx.DiGraph, nodes: set) -> list:
    sub = G.subgraph(nodes)
    best = None
    for start in sorted(nodes)[:256]:
        try:
            path = None
            for succ in sorted(sub.successors(start)):
                p = nx.shortest_path(sub, succ, start)
                if path is None or len(p) < len(path):
                    path = p
            if path is not None and (best is None or len(path) + 1 < len(best)):
                best = [start] + path
        except nx.NetworkXNoPath:
            continue
    return best or []


def validate_schedule(sscs) -> ScheduleCheck:
    """Deadlock check: ok iff the queue+event union graph is acyclic."""
    if isinstance(sscs, SSC):
        sscs = [sscs]
    G = union_graph(sscs)
    if nx.is_directed_acyclic_graph(G):
        return ScheduleCheck()
    for comp in nx.strongly_connected_components(G):
        if len(comp) > 1:
            return ScheduleCheck(_shortest_cycle(G, comp))
    # self-loop
    for u, v in G.edges:
        if u == v:
            return ScheduleCheck([u, u])
    return ScheduleCheck()


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def ssc_to_dict(ssc: SSC) -> dict:
    return {
        "version": ssc.version,
        "shape_bucket_key": ssc.shape_bucket_key,
        "rank_id": ssc.rank_id,
        "tds": [td.to_dict() for td in ssc.tds],
        "events": [
            {"id": c.id, "threshold": c.threshold,
             "waiters": sorted(ssc.events.waiter_of.get(c.id, ())),
             "triggered_by": [list(u) for u in ssc.events.triggered_by.get(c.id, ())]}
            for c in sorted(ssc.events.counters.values(), key=lambda c: c.id)
        ],
        "queues": {"ctq": list(ssc.queues.ctq), "vtq": list(ssc.queues.vtq)},
        "tiling_metadata": ssc.tiling_metadata,
    }


def serialize_ssc(ssc: SSC) -> bytes:
    return (json.dumps(ssc_to_dict(ssc), sort_keys=True, indent=1) + "\n").encode()


def deserialize_ssc(data: bytes | str) -> SSC:
    if isinstance(data, bytes):
        try:
            data = data.decode()
        except UnicodeDecodeError as e:
            raise ParseError("document is not UTF-8", e.start) from e
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed SSC document: {e.msg}", f"line {e.lineno} col {e.colno}") from e
    if not isinstance(doc, dict):
        raise ParseError("SSC document must be an object", "$")
    for key in ("version", "shape_bucket_key", "rank_id", "tds", "events", "queues",
                "tiling_metadata"):
        if key not in doc:
            raise ParseError(f"missing key {key!r}", "$")
    if doc["version"] != SSC_VERSION:
        raise VersionError(f"SSC version {doc['version']} unsupported (expected {SSC_VERSION})")
    try:
        tds = [TaskDescriptor.from_dict(d) for d in doc["tds"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad task descriptor: {e}", "$.tds") from e
    events = EventTable()
    try:
        for ev in doc["events"]:
            cid = ev["id"]
            events.counters[cid] = EventCounter(cid, ev["threshold"])
            events.waiter_of[cid] = set(ev.get("waiters", ()))
            events.triggered_by[cid] = [tuple(u) for u in ev.get("triggered_by", ())]
        queues = QueueSchedule(doc["queues"]["ctq"], doc["queues"]["vtq"])
    except (KeyError, TypeError) as e:
        raise ParseError(f"bad events/queues section: {e}", "$.events") from e
    return SSC(doc["version"], doc["shape_bucket_key"], doc["rank_id"], tds, events, queues,
               doc["tiling_metadata"])
