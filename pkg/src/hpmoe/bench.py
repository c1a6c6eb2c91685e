"""Simulator microbenchmark suites producing CSV comparison tables."""

from __future__ import annotations

import csv
import io
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .compiler import compile_moe, compile_swiglu_add, ssc_from_tds
from .cost import CostModel
from .errors import ConfigError
from .events import EventTable
from .graph import OperatorKind, ShapeConfig
from .scheduler import QueueSchedule, ratr_order
from .sim import simulate
from .tasks import PUT_MEM_SIGNAL, REMOTE_DST, VTQ, CommInfo, TaskDescriptor, TensorSlice

K = 1024
CACHE_M = (2 * K, 8 * K, 16 * K, 32 * K)
OVERHEAD_M = (2 * K, 8 * K, 16 * K, 32 * K)
OVERLAP_EP = (2, 4, 8)
RATR_P = (2, 3, 4, 5, 6, 7, 8)

CACHE_HIDDEN = 4096
CACHE_ROWS_PER_TILE = 64


# ---------------------------------------------------------------------------
# cache-guided interleaving (SwiGLU + Add)
# ---------------------------------------------------------------------------

def cache_point(m: int, hidden_in: int = CACHE_HIDDEN, rows_per_tile: int = CACHE_ROWS_PER_TILE,
                cm: CostModel | None = None) -> dict:
    cm = cm or CostModel()
    out = {"M": m}
    for label, inter in (("serial", False), ("interleaved", True)):
        ct = compile_swiglu_add(m, hidden_in, rows_per_tile, interleave=inter)
        r = simulate(ct.sscs, cm)
        out[f"{label}_makespan_us"] = r.makespan
        out[f"{label}_hit_rate"] = r.metrics[0].l2_hit_rate
    out["speedup"] = out["serial_makespan_us"] / out["interleaved_makespan_us"]
    return out


# ---------------------------------------------------------------------------
# static vs dynamic dispatch overhead
# ---------------------------------------------------------------------------

def overhead_cost_model(per_element_us: float = 1e-6) -> CostModel:
    """Near-zero compute so the per-task dispatch cost dominates."""
    return CostModel(compute_fixed_us={k.value: 0.0 for k in OperatorKind},
                     compute_per_unit_us={k.value: per_element_us for k in OperatorKind},
                     hbm_read_time_per_byte=0.0, l2_read_time_per_byte=0.0)


def overhead_point(m: int, hidden_in: int = 64, rows_per_tile: int = 16,
                   cm: CostModel | None = None) -> dict:
    cm = cm or overhead_cost_model()
    ct = compile_swiglu_add(m, hidden_in, rows_per_tile, interleave=True)
    n = sum(len(s.tds) for s in ct.sscs)
    static = simulate(ct.sscs, cm, dispatch="static").makespan
    dynamic = simulate(ct.sscs, cm, dispatch="dynamic").makespan
    gap = cm.dispatch_overhead_dynamic - cm.dispatch_overhead_static
    return {"M": m, "tasks": n, "static_makespan_us": static, "dynamic_makespan_us": dynamic,
            "gap_us": dynamic - static, "expected_gap_us": n * gap, "ratio": dynamic / static}


# ---------------------------------------------------------------------------
# RATR: uniform all-to-all
# ---------------------------------------------------------------------------

def naive_order(rank: int, ep_size: int) -> list[int]:
    return list(range(ep_size))


def all_to_all_sscs(ep_size: int, nbytes: int, orders) -> list:
    """One PutMemSignal per remote destination, issued in ``orders[rank]`` order.

    ``orders`` is a list of destination lists or a function ``(rank, P)``.
    Self-destinations are dropped: local data never crosses a link.
    """
    sscs = []
    rows = max(nbytes // 4, 1)
    for r in range(ep_size):
        order = orders(r, ep_size) if callable(orders) else orders[r]
        tds = []
        for d in order:
            if d == r:
                continue
            tds.append(TaskDescriptor(
                PUT_MEM_SIGNAL, VTQ,
                (TensorSlice(0, (d * rows,), (rows,)),),
                (TensorSlice(1, (r * rows,), (rows,), frozenset({REMOTE_DST})),),
                task_index=d, task_split_num=ep_size, task_split_value=rows,
                tiling_data_position=0, op_id=0, op_kind=OperatorKind.Dispatch, rank=r,
                comm=CommInfo(d, 1, nbytes)))
        q = QueueSchedule((), tuple(range(len(tds))))
        sscs.append(ssc_from_tds(tds, r, EventTable(), q))
    return sscs


def ratr_cost_model() -> CostModel:
    return CostModel(aiv_workers=1, aic_workers=1)


def all_to_all_makespan(ep_size: int, nbytes: int, orders, cm: CostModel | None = None) -> float:
    return simulate(all_to_all_sscs(ep_size, nbytes, orders), cm or ratr_cost_model()).makespan


def fast_all_to_all_makespan(orders: list[list[int]], cm: CostModel, nbytes: int) -> float:
    """Closed-loop evaluator of the same link model, for exhaustive searches.

    One worker per rank issues its sends back to back; each destination link
    serves requests first-come first-served (ties by source rank).
    """
    P = len(orders)
    xfer = cm.transfer_time(nbytes)
    overhead = cm.dispatch_overhead_static
    pending = [[d for d in orders[r] if d != r] for r in range(P)]
    pos = [0] * P
    ready = [overhead] * P
    link_free = [0.0] * P
    end = 0.0
    while True:
        best = None
        for r in range(P):
            if pos[r] < len(pending[r]) and (best is None or ready[r] < ready[best]):
                best = r
        if best is None:
            return end
        r = best
        d = pending[r][pos[r]]
        start = max(ready[r], link_free[d])
        finish = start + xfer
        link_free[d] = finish
        pos[r] += 1
        ready[r] = finish + overhead
        end = max(end, finish)


def brute_force_orders(ep_size: int, cm: CostModel, nbytes: int):
    """Minimum makespan over every combination of per-rank destination orders."""
    perms = [list(itertools.permutations([d for d in range(ep_size) if d != r]))
             for r in range(ep_size)]
    best = None
    for combo in itertools.product(*perms):
        m = fast_all_to_all_makespan([list(c) for c in combo], cm, nbytes)
        if best is None or m < best[0] - 1e-9:
            best = (m, combo)
    return best


def ratr_point(ep_size: int, nbytes: int = 1 << 20, cm: CostModel | None = None) -> dict:
    cm = cm or ratr_cost_model()
    naive = all_to_all_makespan(ep_size, nbytes, naive_order, cm)
    ring = all_to_all_makespan(ep_size, nbytes, ratr_order, cm)
    return {"P": ep_size, "naive_makespan_us": naive, "ratr_makespan_us": ring,
            "speedup": naive / ring}


# ---------------------------------------------------------------------------
# overlap benefit of the pipelined taskflow
# ---------------------------------------------------------------------------

def overlap_shape(ep_size: int) -> ShapeConfig:
    return ShapeConfig(seq_len=512, hidden=256, intermediate=128, top_k=2,
                       total_experts=4 * ep_size, ep_size=ep_size, local_experts=4)


def overlap_point(ep_size: int, kind: str = "forward", cm: CostModel | None = None) -> dict:
    cm = cm or CostModel()
    ct = compile_moe(kind, overlap_shape(ep_size))
    pipe = simulate(ct.sscs, cm, "pipelined")
    serial = simulate(ct.sscs, cm, "serial_baseline")
    return {
        "EP": ep_size, "graph": kind,
        "pipelined_makespan_us": pipe.makespan, "serial_makespan_us": serial.makespan,
        "speedup": serial.makespan / pipe.makespan,
        "serial_max_busy_sum": max(m.aic_busy_fraction + m.aiv_busy_fraction
                                   for m in serial.metrics),
        "pipelined_min_busy_sum": min(m.aic_busy_fraction + m.aiv_busy_fraction
                                      for m in pipe.metrics),
        "pipelined_exposed_comm": max(m.exposed_comm_fraction for m in pipe.metrics),
    }


# ---------------------------------------------------------------------------
# suite runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Job:
    suite: str
    arg: object


def _run_job(job: _Job) -> dict:
    if job.suite == "cache_interleave":
        return cache_point(job.arg)
    if job.suite == "sched_overhead":
        return overhead_point(job.arg)
    if job.suite == "ratr":
        return ratr_point(job.arg)
    ep, kind = job.arg
    return overlap_point(ep, kind)


SUITES = ("cache_interleave", "sched_overhead", "ratr", "overlap")


def run_suite(suite: str, values=None, jobs: int = 1) -> list[dict]:
    if suite not in SUITES:
        raise ConfigError(f"unknown bench suite {suite!r}; choose from {', '.join(SUITES)}")
    if suite == "cache_interleave":
        args = list(values or CACHE_M)
    elif suite == "sched_overhead":
        args = list(values or OVERHEAD_M)
    elif suite == "ratr":
        args = list(values or RATR_P)
    else:
        args = [(ep, kind) for ep in (values or OVERLAP_EP) for kind in ("forward", "backward")]
    work = [_Job(suite, a) for a in args]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_job, work))
    return [_run_job(j) for j in work]


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
