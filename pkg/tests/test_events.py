from __future__ import annotations

from dataclasses import replace

import pytest
from gen import random_dag

from hpmoe.compiler import CompileOptions, check_compiled, compile_graphs, compile_moe
from hpmoe.errors import UncoveredRegion
from hpmoe.events import EventCounter, assign_events, build_tile_deps, verify_thresholds
from hpmoe.graph import (
    ODG, OperatorKind, OperatorNode, ShapeConfig, SplitSpec, TaskNumPolicy, TensorNode,
)
from hpmoe.propagation import propagate_and_annotate
from hpmoe.sim import dependency_violations, simulate
from hpmoe.tasks import generate_tasks

K = OperatorKind


def brute_force_edges(tds, g):
    """All-pairs slice intersection on one rank."""
    inputs = g.graph_inputs()
    edges = set()
    for p, ptd in enumerate(tds):
        for c, ctd in enumerate(tds):
            if p == c:
                continue
            for so in ptd.outputs:
                for si in ctd.inputs:
                    if si.tensor_id in inputs or si.is_metadata:
                        continue
                    if so.intersection(si) is not None:
                        edges.add(((0, p), (0, c)))
    return edges


def _chain(n_gmm, n_swi):
    t = {0: TensorNode(0, "x", (8, 4)), 1: TensorNode(1, "w", (1, 4, 4)),
         2: TensorNode(2, "h", (8, 4)), 3: TensorNode(3, "a", (8, 2))}
    ops = {0: OperatorNode(0, K.GMM1, (0, 1), (2,), SplitSpec(None, (0,), TaskNumPolicy.fixed(n_gmm))),
           1: OperatorNode(1, K.SwiGLU, (2,), (3,), SplitSpec(None, (0,), TaskNumPolicy.fixed(n_swi)))}
    return propagate_and_annotate(ODG(t, ops))[0]


def test_aligned_gmm_swiglu_single_edge():
    g = _chain(4, 4)
    tds = generate_tasks(g)
    dep = build_tile_deps(tds, g)
    assert set(dep.edges) == {((0, k), (0, 4 + k)) for k in range(4)}
    assert set(dep.edges) == brute_force_edges(tds, g)


def test_two_consumers_share_counter():
    g = _chain(1, 2)
    tds = generate_tasks(g)
    dep = build_tile_deps(tds, g)
    tables, new = assign_events(dep, tds)
    t = tables[0]
    assert len(t.counters) == 1
    (cid, counter), = t.counters.items()
    assert counter.threshold == 1
    assert t.waiter_of[cid] == {1, 2}
    assert new[0][0].dependent_event is None
    assert new[0][0].trigger_events == (cid,)
    assert new[0][1].dependent_event == new[0][2].dependent_event == cid


def test_gmm_waits_for_every_dispatch_source():
    c = ShapeConfig(seq_len=8, ep_size=4, local_experts=2, total_experts=8)
    ct = compile_moe("forward", c)
    for r, tds in enumerate(ct.tds):
        table = ct.sscs[r].events
        for i, td in enumerate(tds):
            if td.op_kind is K.GMM1:
                producers = table.triggered_by[td.dependent_event]
                assert table.counters[td.dependent_event].threshold == 4
                assert {p[0] for p in producers} == {0, 1, 2, 3}


def test_random_dags_edges_match_brute_force_and_thresholds_exact():
    for seed in range(300):
        ct = compile_graphs([random_dag(seed)])
        g = ct.graphs[0]
        tds = generate_tasks(g)
        assert set(ct.dep.edges) == brute_force_edges(tds, g)
        assert verify_thresholds(ct.tds, [s.events for s in ct.sscs], ct.dep) == []
        table = ct.sscs[0].events
        for cid, counter in table.counters.items():
            assert counter.threshold == len(table.triggered_by[cid])
        for i, td in enumerate(ct.tds[0]):
            assert td.dependent_event not in td.trigger_events or td.dependent_event is None
            # sharing never hides a producer from a waiter
            if td.dependent_event is not None:
                seen = set(table.triggered_by[td.dependent_event])
                assert set(ct.dep.preds()[(0, i)]) <= seen


def test_source_tasks_have_no_dependent_event():
    ct = compile_moe("forward", ShapeConfig(ep_size=2, local_experts=2, total_experts=4))
    for tds in ct.tds:
        for td in tds:
            if td.op_kind is K.Dispatch:
                assert td.dependent_event is None


def test_threshold_tamper_detected():
    ct = compile_moe("forward", ShapeConfig(ep_size=2, local_experts=2, total_experts=4))
    tables = [s.events for s in ct.sscs]
    cid, counter = next(iter(tables[0].counters.items()))
    tables[0].counters[cid] = EventCounter(cid, counter.threshold - 1)
    v = verify_thresholds(ct.tds, tables, ct.dep)
    assert any(f"threshold({cid}@rank0)" in s and "producer count" in s for s in v)


def test_dropped_edge_detected():
    ct = compile_moe("forward", ShapeConfig(ep_size=2, local_experts=2, total_experts=4))
    tds = [list(t) for t in ct.tds]
    (p, c) = next(e for e in sorted(ct.dep.edges) if e[0][0] == e[1][0])
    ptd = tds[p[0]][p[1]]
    tds[p[0]][p[1]] = replace(ptd, trigger_events=())
    v = verify_thresholds(tds, [s.events for s in ct.sscs], ct.dep)
    assert any(f"edge {p} -> {c}" in s for s in v)


def test_uncovered_region_raises():
    t = {0: TensorNode(0, "x", (8, 4)), 1: TensorNode(1, "h", (8, 4)), 2: TensorNode(2, "a", (8, 2))}
    ops = {0: OperatorNode(0, K.ElemAdd, (0, 0), (1,), SplitSpec(None, (0,), TaskNumPolicy.fixed(2))),
           1: OperatorNode(1, K.SwiGLU, (1,), (2,), SplitSpec(None, (0,), TaskNumPolicy.fixed(1)))}
    g = propagate_and_annotate(ODG(t, ops))[0]
    tds = generate_tasks(g)[1:]  # drop one producer tile
    with pytest.raises(UncoveredRegion):
        build_tile_deps(tds, g)


def _fan_out_graph():
    # one GMM tile feeds two consumers with different producer sets
    t = {0: TensorNode(0, "x", (8, 4)), 1: TensorNode(1, "w", (1, 4, 4)),
         2: TensorNode(2, "h", (8, 4)), 3: TensorNode(3, "r", (8, 4)),
         4: TensorNode(4, "s", (8, 4)), 5: TensorNode(5, "o", (8, 4))}
    ops = {0: OperatorNode(0, K.GMM1, (0, 1), (2,), SplitSpec(None, (0,), TaskNumPolicy.fixed(2))),
           1: OperatorNode(1, K.ElemAdd, (0, 3), (4,), SplitSpec(None, (0,), TaskNumPolicy.fixed(1))),
           2: OperatorNode(2, K.ElemAdd, (2, 4), (5,), SplitSpec(None, (0,), TaskNumPolicy.fixed(2)))}
    return ODG(t, ops)


def test_strict_single_trigger_merges_and_stays_sound():
    g = _fan_out_graph()
    loose = compile_graphs([g])
    strict = compile_graphs([g], options=CompileOptions(strict_single_trigger=True))
    assert any(len(td.trigger_events) > 1 for td in loose.tds[0])
    assert all(len(td.trigger_events) <= 1 for td in strict.tds[0])
    assert len(strict.sscs[0].events.counters) < len(loose.sscs[0].events.counters)
    for ct in (loose, strict):
        assert check_compiled(ct) == []
        r = simulate(ct.sscs)
        assert dependency_violations(r, ct.dep) == []


@pytest.mark.parametrize("ep", [1, 2, 4])
@pytest.mark.parametrize("kind", ["forward", "backward"])
def test_strict_moe_sound(kind, ep):
    c = ShapeConfig(seq_len=8, ep_size=ep, local_experts=2, total_experts=2 * ep)
    ct = compile_moe(kind, c, options=CompileOptions(strict_single_trigger=True))
    assert check_compiled(ct) == []
    r = simulate(ct.sscs)
    assert dependency_violations(r, ct.dep) == []
    for s in ct.sscs:
        unmerged = set(s.events.unmerged_producers)
        for i, td in enumerate(s.tds):
            if (s.rank_id, i) not in unmerged:
                assert len(td.trigger_events) <= 1
