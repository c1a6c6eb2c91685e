from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hpmoe.errors import RoutingError
from hpmoe.graph import ShapeConfig
from hpmoe.routing import RoutingPlan, balanced_plan, natural_plan


def cfg(ep=2, L=2, k=2, T=8):
    return ShapeConfig(seq_len=T, top_k=k, total_experts=ep * L, ep_size=ep, local_experts=L)


def test_balanced_plan_is_uniform():
    for ep in (1, 2, 4):
        p = balanced_plan(cfg(ep=ep, L=2, k=2, T=8))
        assert (p.counts.sum(axis=0) == 8 * ep * 2 // (2 * ep)).all()
        assert all(p.recv_rows(d) == 16 for d in range(ep))


@settings(max_examples=40, deadline=None)
@given(ep=st.sampled_from([1, 2, 3, 4]), L=st.integers(1, 3), k=st.integers(1, 3),
       T=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_natural_plan_layout_is_consistent(ep, L, k, T, seed):
    if k > ep * L:
        return
    p = natural_plan(cfg(ep, L, k, T), seed=seed, skew=1.2)
    # every route is counted exactly once
    assert p.counts.sum() == ep * T * k
    for d in range(ep):
        bounds = p.group_bounds(d)
        assert bounds[0][0] == 0 and bounds[-1][1] == p.recv_rows(d)
        for j in range(L):
            e = d * L + j
            # source blocks tile the expert group in source-rank order
            off = bounds[j][0]
            for s in range(ep):
                assert p.block_offset(d, j, s) == off
                off += p.count(s, e)
            assert off == bounds[j][1]
        assert sum(p.combine_sizes(d)) == sum(p.count(s, e) for s in range(ep)
                                             for e in range(d * L, (d + 1) * L))
    assert (p.send_counts().sum(axis=1) == T * k).all()


def test_tokens_ascending_and_weights_match_routes():
    p = natural_plan(cfg(2, 2, 2, 16), seed=3)
    for s in range(2):
        for e in range(4):
            toks = p.tokens_for(s, e)
            assert (np.diff(toks) > 0).all()
            for t, w in zip(toks, p.weights_for(s, e)):
                assert (e, w) in p.routes[s][t]


def test_natural_plan_seeded():
    assert natural_plan(cfg(), seed=1) == natural_plan(cfg(), seed=1)
    assert natural_plan(cfg(), seed=1) != natural_plan(cfg(), seed=2)


def test_json_round_trip():
    p = natural_plan(cfg(4, 2, 2, 6), seed=5)
    q = RoutingPlan.from_json(p.to_json())
    assert q == p and hash(q) == hash(p)


@pytest.mark.parametrize("routes", [
    [[[(0, 0.5), (0, 0.5)]], [[(1, 1.0), (2, 0.0)]]],      # duplicate expert
    [[[(0, 0.5), (9, 0.5)]], [[(1, 1.0), (2, 0.0)]]],      # out of range
    [[[(0, -0.5), (1, 0.5)]], [[(1, 1.0), (2, 0.0)]]],     # negative weight
    [[[(0, 1.0)]], [[(1, 1.0), (2, 0.0)]]],                # wrong top_k
    [[[(0, 0.5), (1, 0.5)]]],                              # missing rank
])
def test_invalid_plans_rejected(routes):
    with pytest.raises(RoutingError):
        RoutingPlan(2, 2, 2, 1, routes)


def test_check_config_mismatch():
    p = balanced_plan(cfg())
    p.check_config(cfg())
    with pytest.raises(RoutingError):
        p.check_config(cfg(T=4))
