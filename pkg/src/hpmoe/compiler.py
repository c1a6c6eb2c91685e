"""End-to-end static compilation: ODG -> TDs -> events -> queues -> per-rank SSC."""

from __future__ import annotations

from dataclasses import dataclass

from .events import TileDependencyGraph, assign_events, build_tile_deps, verify_thresholds
from .graph import (
    ODG, ShapeConfig, build_backward_moe_ffn, build_forward_moe_ffn,
    build_swiglu_add_chain, topological_sort,
)
from .propagation import PropagationResult, propagate_and_annotate
from .routing import RoutingPlan, balanced_plan
from .scheduler import (
    INTERLEAVE_PAIRS, SSC, SSC_VERSION, QueueSchedule, apply_gmm_interleaving, apply_ratr,
    build_queues, validate_schedule,
)
from .tasks import TaskDescriptor, generate_tasks


@dataclass(frozen=True)
class CompileOptions:
    ratr: bool = True
    ratr_combine: bool = True
    interleave: bool = True
    strict_single_trigger: bool = False
    # producer tiles issued ahead of their consumers by tile interleaving;
    # matches the default AIV worker count so no worker blocks on a fresh tile
    interleave_window: int = 50


@dataclass
class CompiledTaskflow:
    graphs: list[ODG]
    propagation: list[PropagationResult]
    sscs: list[SSC]
    dep: TileDependencyGraph
    plan: RoutingPlan | None
    options: CompileOptions

    @property
    def tds(self) -> list[list[TaskDescriptor]]:
        return [s.tds for s in self.sscs]

    def report(self) -> dict:
        return {
            "ranks": len(self.sscs),
            "graph": self.graphs[0].name,
            "per_rank": [
                {"rank": s.rank_id, "tasks": len(s.tds), "events": len(s.events.counters),
                 "ctq": len(s.queues.ctq), "vtq": len(s.queues.vtq),
                 "unmerged_producers": [list(u) for u in s.events.unmerged_producers],
                 "fallback_ops": sorted(self.graphs[s.rank_id].operators[o].kind.value
                                        for o in self.propagation[s.rank_id].fallback_ops),
                 "unlabeled_multi_task": sorted(self.propagation[s.rank_id].unlabeled_multi_task)}
                for s in self.sscs
            ],
        }


def apply_tile_interleaving(q: QueueSchedule, tds: list[TaskDescriptor],
                            window: int = 1) -> QueueSchedule:
    """Issue consumer tiles shortly after their producer tiles in the VTQ.

    Tiles are grouped into windows of ``window`` task indices; each window
    runs producer tiles then consumer tiles, so a consumer reads data its
    producer wrote at most one window earlier.
    """
    if window < 1:
        raise ValueError("interleave window must be positive")
    order = sorted(q.vtq, key=lambda i: (tds[i].task_index // window,
                                         tds[i].tiling_data_position, tds[i].task_index, i))
    return QueueSchedule(q.ctq, order)


def shape_bucket_key(g: ODG) -> str:
    c = g.shape_config
    if c is None:
        return f"{g.name}:{g.fingerprint()[:16]}"
    return (f"{g.name}:T{c.tokens}:H{c.hidden}:I{c.intermediate}:k{c.top_k}"
            f":E{c.total_experts}:P{c.ep_size}")


def compile_graphs(graphs: list[ODG], plan: RoutingPlan | None = None,
                   options: CompileOptions = CompileOptions()) -> CompiledTaskflow:
    annotated, results = [], []
    for g in graphs:
        ag, r = propagate_and_annotate(g)
        annotated.append(ag)
        results.append(r)
    tds = [generate_tasks(g, plan) for g in annotated]
    dep = build_tile_deps(tds, annotated)
    queues = []
    for rank, g in enumerate(annotated):
        rtds = tds[rank]
        q = build_queues(rtds, dep)
        P = g.shape_config.ep_size if g.shape_config else 1
        if options.ratr:
            q = apply_ratr(q, rtds, rank, P, options.ratr_combine)
        if options.interleave:
            kinds = {td.op_kind for td in rtds}
            if any(a in kinds and b in kinds for a, b in INTERLEAVE_PAIRS):
                q = apply_gmm_interleaving(q, rtds, g, plan)
            elif g.name == "swiglu_add":
                q = apply_tile_interleaving(q, rtds, options.interleave_window)
        queues.append(q)
    precedence = [((r, u), (r, v)) for r, q in enumerate(queues)
                  for queue in (q.ctq, q.vtq) for u, v in zip(queue, queue[1:])]
    tables, tds = assign_events(dep, tds, options.strict_single_trigger, precedence)
    sscs = []
    for rank, g in enumerate(annotated):
        rtds = tds[rank]
        q = queues[rank]
        order = topological_sort(g)
        tiling = [
            {"position": pos, "op_id": oid, "kind": g.operators[oid].kind.value,
             "task_num": g.operators[oid].task_num,
             "fallback": oid in results[rank].fallback_ops,
             "elem_bytes": g.tensors[g.operators[oid].outputs[0]].dtype.width}
            for pos, oid in enumerate(order)
        ]
        sscs.append(SSC(SSC_VERSION, shape_bucket_key(g), rank, rtds, tables[rank], q, tiling))
    return CompiledTaskflow(annotated, results, sscs, dep, plan, options)


def compile_moe(kind: str, c: ShapeConfig, plan: RoutingPlan | None = None,
                options: CompileOptions = CompileOptions()) -> CompiledTaskflow:
    """Compile the forward or backward MoE-FFN fragment for every EP rank."""
    c = c.validate()
    plan = plan or balanced_plan(c)
    plan.check_config(c)
    builder = {"forward": build_forward_moe_ffn, "backward": build_backward_moe_ffn}[kind]
    graphs = [builder(c.for_rank(r), recv_rows=plan.recv_rows(r)) for r in range(c.ep_size)]
    return compile_graphs(graphs, plan, options)


def compile_swiglu_add(m: int, hidden_in: int, rows_per_tile: int | None = None,
                       interleave: bool = True, window: int = 50) -> CompiledTaskflow:
    g = build_swiglu_add_chain(m, hidden_in, rows_per_tile)
    opts = CompileOptions(ratr=False, interleave=interleave, interleave_window=window)
    return compile_graphs([g], None, opts)


def check_compiled(ct: CompiledTaskflow) -> list[str]:
    """Threshold exactness plus deadlock freedom; returns violations."""
    problems = verify_thresholds(ct.tds, [s.events for s in ct.sscs], ct.dep)
    chk = validate_schedule(ct.sscs)
    if not chk.ok:
        problems.append(f"deadlock cycle {chk.witness}")
    return problems


def ssc_from_tds(tds: list[TaskDescriptor], rank: int = 0, events=None,
                 queues: QueueSchedule | None = None) -> SSC:
    """Wrap hand-built TDs (already carrying their events) into an SSC."""
    from .events import EventTable

    return SSC(SSC_VERSION, "adhoc", rank, list(tds), events or EventTable(),
               queues or build_queues(tds), [])
