"""Deterministic multi-rank discrete-event simulator of the AIC/AIV runtime.

Virtual time is in microseconds.  Each rank has one CTQ served by the AIC
workers and one VTQ served by the AIV workers.  A worker claims the next task
of its queue (claims on one queue are serialized and cost the dispatch
overhead), waits for the task's counter, executes, then signals its trigger
counters.  PutMemSignal tasks push data through the destination rank's serial
ingress link.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import asdict, dataclass, field

from .cache import L2Cache
from .cost import CostModel
from .errors import ConfigError, DeadlockError
from .graph import ResourceClass
from .scheduler import SSC
from .tasks import METADATA, PUT_MEM_SIGNAL, SCATTER, TaskDescriptor

AIC, AIV = "AIC", "AIV"
WAIT, EXEC, COMM = "WAIT", "EXEC", "COMM"
_CLASS_ORDER = {AIC: 0, AIV: 1}
_COUNTER = 2  # tie-break slot for counter events

MODES = ("pipelined", "serial_baseline")
DISPATCH_MODES = ("static", "dynamic")


@dataclass(frozen=True)
class TraceEvent:
    timestamp_us: float
    duration_us: float
    rank: int
    worker_class: str
    worker_index: int
    td_id: int
    phase: str
    # trailing part of a WAIT spent blocked on a counter, and whether that
    # counter is fed by communication
    blocked_us: float = 0.0
    comm_fed: bool = False

    @property
    def end_us(self) -> float:
        return self.timestamp_us + self.duration_us


@dataclass
class TaskRecord:
    rank: int
    td_id: int
    worker_class: str
    worker_index: int
    claim_start: float
    exec_start: float
    end: float
    wait_us: float
    commit_seq: int = -1

    @property
    def commit(self) -> float:
        return self.end


@dataclass
class SimMetrics:
    makespan_us: float
    aic_busy_fraction: float
    aiv_busy_fraction: float
    exposed_comm_fraction: float
    l2_hit_rate: float
    per_task_records: list = field(default_factory=list)

    def to_dict(self, with_records: bool = False) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("per_task_records")
        return d


@dataclass
class SimResult:
    mode: str
    dispatch: str
    trace: list[TraceEvent]
    records: dict[tuple[int, int], TaskRecord]
    commit_order: list[tuple[int, int]]
    cache_stats: list[tuple[int, int]]
    metrics: list[SimMetrics]

    @property
    def makespan(self) -> float:
        return max((m.makespan_us for m in self.metrics), default=0.0)

    def report(self) -> dict:
        """Flat report: global makespan plus per-rank SimMetrics fields."""
        return {
            "mode": self.mode,
            "dispatch": self.dispatch,
            "makespan_us": self.makespan,
            "ranks": [m.to_dict() for m in self.metrics],
        }


# ---------------------------------------------------------------------------
# task costs
# ---------------------------------------------------------------------------

def task_work(td: TaskDescriptor) -> int:
    """MACs for CUBE tasks, output elements for VECTOR tasks."""
    if td.task_type == PUT_MEM_SIGNAL:
        return td.comm.byte_count
    if td.resource is ResourceClass.CUBE:
        ins = [s for s in td.inputs if METADATA not in s.flags]
        w3 = [s for s in ins if len(s.extents) == 3]
        x2 = [s for s in ins if len(s.extents) == 2]
        if w3 and x2:
            return x2[0].extents[0] * w3[0].extents[1] * w3[0].extents[2]
        if len(x2) >= 2:
            return x2[0].extents[0] * x2[0].extents[1] * x2[1].extents[1]
        return sum(s.numel for s in ins)
    return sum(s.numel for s in td.outputs)


def _region(s):
    return (s.tensor_id, s.offsets, s.extents)


def _elem_bytes(ssc: SSC) -> int:
    for entry in ssc.tiling_metadata or ():
        if isinstance(entry, dict) and "elem_bytes" in entry:
            return int(entry["elem_bytes"])
    return 4


def _comm_fed_counters(sscs: list[SSC]) -> dict[int, set[int]]:
    by_rank = {s.rank_id: s for s in sscs}
    fed: dict[int, set[int]] = {s.rank_id: set() for s in sscs}
    for s in sscs:
        for cid, producers in s.events.triggered_by.items():
            for r, i in producers:
                src = by_rank.get(r)
                if src is not None and src.tds[i].task_type == PUT_MEM_SIGNAL:
                    fed[s.rank_id].add(cid)
                    break
    return fed


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, sscs: list[SSC], cm: CostModel):
        self.sscs = sorted(sscs, key=lambda s: s.rank_id)
        self.by_rank = {s.rank_id: s for s in self.sscs}
        if len(self.by_rank) != len(self.sscs):
            raise ConfigError("duplicate rank ids among SSCs")
        self.cm = cm
        self.eb = {s.rank_id: _elem_bytes(s) for s in self.sscs}
        self.caches = {
            s.rank_id: L2Cache(cm.l2_capacity_bytes, cm.l2_read_time_per_byte,
                               cm.hbm_read_time_per_byte, self.eb[s.rank_id])
            for s in self.sscs
        }
        self.link_free: dict[int, float] = {s.rank_id: 0.0 for s in self.sscs}
        self.records: dict[tuple[int, int], TaskRecord] = {}
        self.trace: list[TraceEvent] = []
        self.commit_order: list[tuple[int, int]] = []
        self.heap: list = []
        self.seq = 0
        self.fed = _comm_fed_counters(self.sscs)

    def push(self, t, rank, slot, widx, kind, payload):
        self.seq += 1
        heapq.heappush(self.heap, (t, rank, slot, widx, self.seq, kind, payload))

    def workers(self, cls: str) -> int:
        return self.cm.aic_workers if cls == AIC else self.cm.aiv_workers

    def exec_duration(self, rank: int, td: TaskDescriptor, t: float) -> float:
        """Time from exec start to completion; performs cache reads and link reservation."""
        if td.task_type == PUT_MEM_SIGNAL:
            d = td.comm.dst_rank
            nbytes = td.comm.byte_count
            if d == rank:
                return nbytes * self.cm.hbm_read_time_per_byte
            if d not in self.link_free:
                raise ConfigError(f"rank {rank} sends to unknown rank {d}")
            start = max(t, self.link_free[d])
            end = start + self.cm.transfer_time(nbytes)
            self.link_free[d] = end
            return end - t
        cache = self.caches[rank]
        read = 0.0
        for s in td.inputs:
            if METADATA in s.flags or s.numel == 0:
                continue
            dt, _ = cache.read(_region(s), s.numel * self.eb[rank])
            read += dt
        return read + self.cm.compute_time(td.op_kind, task_work(td))

    def commit(self, rank: int, i: int, td: TaskDescriptor, t: float) -> None:
        for s in td.outputs:
            if SCATTER in s.flags or s.numel == 0:
                continue
            target = td.slice_rank(s)
            if target in self.caches:
                self.caches[target].write(_region(s), s.numel * self.eb.get(target, 4))
        rec = self.records[(rank, i)]
        rec.commit_seq = len(self.commit_order)
        self.commit_order.append((rank, i))

    def record(self, rank, i, cls, w, claim_start, claim_end, exec_start, end, td, cid):
        blocked = exec_start - claim_end
        self.records[(rank, i)] = TaskRecord(rank, i, cls, w, claim_start, exec_start, end,
                                             blocked)
        if exec_start > claim_start:
            comm_fed = cid is not None and cid in self.fed.get(rank, ())
            self.trace.append(TraceEvent(claim_start, exec_start - claim_start, rank, cls, w, i,
                                         WAIT, max(blocked, 0.0), comm_fed))
        phase = COMM if td.task_type == PUT_MEM_SIGNAL else EXEC
        self.trace.append(TraceEvent(exec_start, end - exec_start, rank, cls, w, i, phase))

    # -- pipelined -----------------------------------------------------------

    def run_pipelined(self, dispatch: str) -> None:
        overhead = self.cm.dispatch_overhead(dispatch)
        queues = {(s.rank_id, cls): (s.queues.ctq if cls == AIC else s.queues.vtq)
                  for s in self.sscs for cls in (AIC, AIV)}
        head = {k: 0 for k in queues}
        claim_free = {k: 0.0 for k in queues}
        counters = {s.rank_id: {cid: c.initial_value for cid, c in s.events.counters.items()}
                    for s in self.sscs}
        waiting: dict[tuple[int, int], list] = {}
        total = sum(len(s.tds) for s in self.sscs)

        for (rank, cls), q in sorted(queues.items(), key=lambda kv: (kv[0][0], _CLASS_ORDER[kv[0][1]])):
            for w in range(min(self.workers(cls), len(q))):
                self.push(0.0, rank, _CLASS_ORDER[cls], w, "idle", (cls,))

        def start(t, rank, cls, w, i, claim_start, claim_end):
            td = self.by_rank[rank].tds[i]
            end = t + self.exec_duration(rank, td, t)
            self.record(rank, i, cls, w, claim_start, claim_end, t, end, td, td.dependent_event)
            self.push(end, rank, _CLASS_ORDER[cls], w, "finish", (cls, i))

        while self.heap:
            t, rank, slot, w, _, kind, payload = heapq.heappop(self.heap)
            if kind == "idle":
                cls = payload[0]
                key = (rank, cls)
                q = queues[key]
                if head[key] >= len(q):
                    continue
                i = q[head[key]]
                head[key] += 1
                cs = max(t, claim_free[key])
                ce = cs + overhead
                claim_free[key] = ce
                self.push(ce, rank, slot, w, "claimed", (cls, i, cs))
            elif kind == "claimed":
                cls, i, cs = payload
                td = self.by_rank[rank].tds[i]
                cid = td.dependent_event
                table = self.by_rank[rank].events
                if cid is None or counters[rank][cid] >= table.counters[cid].threshold:
                    start(t, rank, cls, w, i, cs, t)
                else:
                    waiting.setdefault((rank, cid), []).append((cls, w, i, cs, t))
            elif kind == "finish":
                cls, i = payload
                td = self.by_rank[rank].tds[i]
                self.commit(rank, i, td, t)
                delay = self.cm.signal_delay if td.task_type == PUT_MEM_SIGNAL else 0.0
                for cid in td.trigger_events:
                    self.push(t + delay, td.trigger_rank, _COUNTER, 0, "signal", (cid,))
                self.push(t, rank, slot, w, "idle", (cls,))
            elif kind == "signal":
                (cid,) = payload
                counters[rank][cid] += 1
                if counters[rank][cid] >= self.by_rank[rank].events.counters[cid].threshold:
                    for cls, ww, i, cs, ce in waiting.pop((rank, cid), []):
                        start(t, rank, cls, ww, i, cs, ce)

        if len(self.commit_order) < total:
            blocked = []
            for (rank, cid), ws in sorted(waiting.items()):
                thr = self.by_rank[rank].events.counters[cid].threshold
                for cls, w, i, _, _ in ws:
                    blocked.append({"rank": rank, "td": i, "worker": f"{cls}{w}", "counter": cid,
                                    "value": counters[rank][cid], "threshold": thr})
            raise DeadlockError(
                f"simulation stalled with {total - len(self.commit_order)} uncommitted tasks",
                blocked)

    # -- serial baseline -----------------------------------------------------

    def run_serial(self) -> None:
        positions = sorted({td.tiling_data_position for s in self.sscs for td in s.tds})
        ready = {s.rank_id: 0.0 for s in self.sscs}
        launch = self.cm.kernel_launch_overhead
        for pos in positions:
            is_comm = any(td.tiling_data_position == pos and td.task_type == PUT_MEM_SIGNAL
                          for s in self.sscs for td in s.tds)
            if is_comm:
                t0 = max(ready.values())
                starts = {r: t0 + launch for r in ready}
            else:
                starts = {r: ready[r] + launch for r in ready}
            pending: dict[tuple[int, str], list[int]] = {}
            for s in self.sscs:
                for cls, q in ((AIC, s.queues.ctq), (AIV, s.queues.vtq)):
                    tasks = [i for i in q if s.tds[i].tiling_data_position == pos]
                    if tasks:
                        pending[(s.rank_id, cls)] = tasks
                        for w in range(min(self.workers(cls), len(tasks))):
                            self.push(starts[s.rank_id], s.rank_id, _CLASS_ORDER[cls], w, "idle",
                                      (cls,))
            ends = dict(starts)
            while self.heap:
                t, rank, slot, w, _, kind, payload = heapq.heappop(self.heap)
                if kind == "idle":
                    cls = payload[0]
                    tasks = pending.get((rank, cls))
                    if not tasks:
                        continue
                    i = tasks.pop(0)
                    td = self.by_rank[rank].tds[i]
                    end = t + self.exec_duration(rank, td, t)
                    self.record(rank, i, cls, w, t, t, t, end, td, None)
                    self.push(end, rank, slot, w, "finish", (cls, i))
                else:
                    cls, i = payload
                    self.commit(rank, i, self.by_rank[rank].tds[i], t)
                    ends[rank] = max(ends[rank], t)
                    self.push(t, rank, slot, w, "idle", (cls,))
            if is_comm:
                done = max(ends.values())
                ready = {r: done for r in ready}
            else:
                ready = ends


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _union(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _length(intervals) -> float:
    return sum(b - a for a, b in intervals)


def _subtract(base, cut) -> list[tuple[float, float]]:
    out = []
    cut = list(cut)
    for a, b in base:
        cur = a
        for c, d in cut:
            if d <= cur or c >= b:
                continue
            if c > cur:
                out.append((cur, c))
            cur = max(cur, d)
        if cur < b:
            out.append((cur, b))
    return out


def compute_metrics(trace: list[TraceEvent], cm: CostModel | None = None,
                    cache_stats: dict[int, tuple[int, int]] | None = None,
                    records: dict | None = None, origin: float = 0.0) -> list[SimMetrics]:
    """Per-rank metrics; ``origin`` is the simulation epoch (all workers start there)."""
    ranks = sorted({e.rank for e in trace} | set(cache_stats or ()))
    out = []
    for r in ranks:
        evs = [e for e in trace if e.rank == r]
        makespan = max((e.end_us for e in evs), default=origin) - origin
        busy = {AIC: [], AIV: []}
        exposed_raw = {AIC: [], AIV: []}
        for e in evs:
            if e.phase in (EXEC, COMM):
                busy[e.worker_class].append((e.timestamp_us, e.end_us))
            elif e.phase == WAIT and e.comm_fed and e.blocked_us > 0:
                exposed_raw[e.worker_class].append((e.end_us - e.blocked_us, e.end_us))
        exposed = []
        for cls in (AIC, AIV):
            exposed += _subtract(_union(exposed_raw[cls]), _union(busy[cls]))
        hit, acc = (cache_stats or {}).get(r, (0, 0))
        recs = []
        if records:
            recs = [{"td_id": rec.td_id, "start": rec.exec_start, "end": rec.end,
                     "worker": f"{rec.worker_class}{rec.worker_index}", "wait_us": rec.wait_us}
                    for (rr, _), rec in sorted(records.items()) if rr == r]

        def frac(x):
            return min(1.0, max(0.0, x / makespan)) if makespan > 0 else 0.0

        out.append(SimMetrics(
            makespan_us=makespan,
            aic_busy_fraction=frac(_length(_union(busy[AIC]))),
            aiv_busy_fraction=frac(_length(_union(busy[AIV]))),
            exposed_comm_fraction=frac(_length(_union(exposed))),
            l2_hit_rate=hit / acc if acc else 0.0,
            per_task_records=recs,
        ))
    return out


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def simulate(sscs, cm: CostModel | None = None, mode: str = "pipelined",
             dispatch: str = "static") -> SimResult:
    if isinstance(sscs, SSC):
        sscs = [sscs]
    cm = cm or CostModel()
    if mode not in MODES:
        raise ConfigError(f"unknown simulation mode {mode!r}")
    if dispatch not in DISPATCH_MODES:
        raise ConfigError(f"unknown dispatch mode {dispatch!r}")
    eng = _Engine(list(sscs), cm)
    if mode == "pipelined":
        eng.run_pipelined(dispatch)
    else:
        eng.run_serial()
    trace = sorted(eng.trace, key=lambda e: (e.timestamp_us, e.rank,
                                             _CLASS_ORDER[e.worker_class], e.worker_index,
                                             e.td_id, e.phase))
    stats = {r: (c.hit_bytes, c.access_bytes) for r, c in eng.caches.items()}
    metrics = compute_metrics(trace, cm, stats, eng.records)
    return SimResult(mode, dispatch, trace, eng.records, eng.commit_order,
                     [stats[r] for r in sorted(stats)], metrics)


def dependency_violations(result: SimResult, dep, delta: float = 0.0) -> list[str]:
    """Edges (p -> c) of the tile graph whose consumer started before p committed."""
    bad = []
    for p, c in sorted(dep.edges):
        rp, rc = result.records[p], result.records[c]
        if rc.exec_start + 1e-9 < rp.commit + delta:
            bad.append(f"{p} -> {c}: commit {rp.commit} > start {rc.exec_start}")
    return bad


def export_trace(trace: list[TraceEvent]) -> list[dict]:
    """Chrome trace-event JSON array; one lane per (rank, worker class, worker index)."""
    out = []
    for e in trace:
        out.append({
            "name": f"td{e.td_id}",
            "cat": e.phase,
            "ph": "X",
            "ts": e.timestamp_us,
            "dur": e.duration_us,
            "pid": e.rank,
            "tid": (0 if e.worker_class == AIC else 1_000_000) + e.worker_index,
            "args": {"td_id": e.td_id, "worker": f"{e.worker_class}{e.worker_index}",
                     "phase": e.phase},
        })
    return out


def trace_json(trace: list[TraceEvent]) -> str:
    return json.dumps(export_trace(trace), sort_keys=True, indent=1) + "\n"
