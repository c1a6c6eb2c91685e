from __future__ import annotations

from dataclasses import replace

import pytest
from gen import random_dag
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import literal_split_propagation

from hpmoe.errors import SplitPolicyError, StaleResultError
from hpmoe.graph import (
    ODG, OperatorKind, OperatorNode, ShapeConfig, SplitSpec, TaskNumPolicy, TensorNode,
    build_backward_moe_ffn, build_forward_moe_ffn, build_swiglu_add_chain,
)
from hpmoe.propagation import annotate, propagate

K = OperatorKind


def with_spec(g: ODG, kind: OperatorKind, **changes) -> ODG:
    op = g.op_by_kind(kind)
    ops = dict(g.operators)
    ops[op.id] = replace(op, spec=replace(op.spec, **changes))
    return ODG(g.tensors, ops, g.shape_config, g.name)


def test_spec_example_dispatch_per_dest_rank():
    c = ShapeConfig(ep_size=4, local_experts=8, total_experts=32)
    g = with_spec(build_forward_moe_ffn(c), K.GMM1,
                  task_num_policy=TaskNumPolicy.inherit_input_split())
    r = propagate(g)
    disp, gmm1 = g.op_by_kind(K.Dispatch), g.op_by_kind(K.GMM1)
    assert r.task_num_by_op[disp.id] == 4
    assert r.labels_by_tensor[disp.outputs[0]] == (0, 4)
    assert r.task_num_by_op[gmm1.id] == 4
    assert not r.fallback_ops


def test_fixed_one_origin_is_unsplit():
    g = build_swiglu_add_chain(8, 4)
    r = propagate(g)
    assert r.task_num_by_op[0] == 1
    assert r.labels_by_tensor[1] == (-1, 1)
    # the consumer requires a row partition that was never produced
    assert r.fallback_ops == {1}


def test_column_split_input_forces_fallback():
    c = ShapeConfig(ep_size=2, local_experts=2, total_experts=4)
    g = with_spec(build_forward_moe_ffn(c), K.Dispatch, split_output_dims=(1,))
    r = propagate(g)
    gmm1 = g.op_by_kind(K.GMM1).id
    assert gmm1 in r.fallback_ops and r.task_num_by_op[gmm1] == 1


def test_combine_ignores_metadata_inputs():
    c = ShapeConfig(ep_size=2, local_experts=4, total_experts=8)
    g = build_forward_moe_ffn(c)
    r = propagate(g)
    comb, gmm2 = g.op_by_kind(K.Combine), g.op_by_kind(K.GMM2)
    for i in comb.spec.ignored_input_indices:
        assert r.labels_by_tensor[comb.inputs[i]] == (-1, 1)
    assert comb.id not in r.fallback_ops
    assert r.task_num_by_op[comb.id] == r.task_num_by_op[gmm2.id] == 4
    # without the ignore set the metadata would force the fallback branch
    strict = with_spec(g, K.Combine, split_inputs=((0, 0), (1, 0)), ignored_input_indices=())
    assert comb.id in propagate(strict).fallback_ops


def test_per_expert_block_needs_divisible_rows():
    g = build_swiglu_add_chain(1000, 8, rows_per_tile=64)
    with pytest.raises(SplitPolicyError, match="SwiGLU"):
        propagate(g)
    assert propagate(build_swiglu_add_chain(32768, 8, 1024)).task_num_by_op[0] == 32


def test_annotate_idempotent_and_stale():
    g = build_backward_moe_ffn(ShapeConfig(ep_size=2, local_experts=2, total_experts=4))
    r = propagate(g)
    ag = annotate(g, r)
    assert propagate(ag) == r
    act = ag.tensors[ag.op_by_kind(K.GmmActGrad).outputs[0]]
    assert (act.split_dim, act.split_num) == (0, 2)
    # the input graph is left untouched
    assert g.tensors[act.id].split_num == 1
    other = build_forward_moe_ffn(ShapeConfig())
    with pytest.raises(StaleResultError):
        annotate(other, r)


def test_annotated_forward_gmm2_label():
    g = build_forward_moe_ffn(ShapeConfig(ep_size=2, local_experts=4, total_experts=8))
    ag = annotate(g, propagate(g))
    op = ag.op_by_kind(K.GMM2)
    t = ag.tensors[op.outputs[0]]
    assert op.task_num == 4
    assert (t.split_dim, t.split_num) == (0, op.task_num)


def test_unlabeled_multi_task_flagged():
    t = {0: TensorNode(0, "x", (8, 4)), 1: TensorNode(1, "y", (8, 2))}
    op = OperatorNode(0, K.SwiGLU, (0,), (1,), SplitSpec(None, (-1,), TaskNumPolicy.fixed(4)))
    r = propagate(ODG(t, {0: op}))
    assert r.labels_by_tensor[1] == (-1, 4)
    assert r.unlabeled_multi_task == frozenset({1})


def _check_against_oracle(g):
    r = propagate(g)
    tn, labels, fb = literal_split_propagation(g, g.shape_config)
    assert r.task_num_by_op == tn
    assert r.labels_by_tensor == labels
    assert r.fallback_ops == fb
    return r


def test_moe_graphs_match_oracle():
    for ep in (1, 2, 4, 8):
        c = ShapeConfig(ep_size=ep, local_experts=2, total_experts=2 * ep)
        _check_against_oracle(build_forward_moe_ffn(c))
        _check_against_oracle(build_backward_moe_ffn(c))


def test_random_graphs_match_oracle_and_invariants():
    fallbacks = 0
    for seed in range(1000):
        g = random_dag(seed)
        r = _check_against_oracle(g)
        fallbacks += bool(r.fallback_ops)
        producer = {t: o.id for o in g.operators.values() for t in o.outputs}
        for op in g.operators.values():
            n = r.task_num_by_op[op.id]
            assert n >= 1
            if op.id in r.fallback_ops:
                assert n == 1
            elif op.spec.split_inputs is not None:
                for i, d in op.spec.split_inputs:
                    if i not in op.spec.ignored_input_indices:
                        assert r.labels_by_tensor[op.inputs[i]][0] == d
            # monotone fallback: a consumer that needs a row partition from a
            # fallen-back producer cannot be split either
            for i, d in op.spec.split_inputs or ():
                p = producer.get(op.inputs[i])
                if p in r.fallback_ops and d >= 0:
                    assert op.id in r.fallback_ops
    assert fallbacks > 100


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_propagate_is_pure(seed):
    g = random_dag(seed)
    assert propagate(g) == propagate(g)
