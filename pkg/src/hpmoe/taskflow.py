"""Execute compiled TDs on real buffers in the simulator's commit order.

Every buffer carries a written-mask.  A handler that reads a produced element
whose producer has not run yet aborts with VerificationError, which is how an
unsound schedule or event table shows up numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .compiler import CompiledTaskflow
from .cost import CostModel
from .errors import ShapeError, VerificationError
from .graph import OperatorKind as K
from .numeric import local_weights, swiglu, swiglu_grad
from .routing import RoutingPlan
from .sim import SimResult, simulate
from .tasks import GATHER, METADATA, PUT_MEM_SIGNAL, TaskDescriptor

FaultHook = Callable[[int, int, TaskDescriptor, dict], None]

_FWD_GMM = {K.GMM1, K.GMM2}
_GRAD_GMM = {K.GmmActGrad, K.GmmGateGrad}
_WGRAD = {K.GmmW1Grad, K.GmmW2Grad}


@dataclass
class TaskflowResult:
    buffers: list[dict[str, np.ndarray]]
    commit_order: list[tuple[int, int]]
    sim: SimResult | None = None
    executed: int = 0

    def get(self, name: str) -> list[np.ndarray]:
        return [b[name] for b in self.buffers]


@dataclass
class _RankState:
    arrays: dict[int, np.ndarray] = field(default_factory=dict)
    written: dict[int, np.ndarray] = field(default_factory=dict)
    staging: dict[int, np.ndarray] = field(default_factory=dict)


def moe_inputs(kind: str, problem: dict, plan: RoutingPlan, forward: dict | None = None
               ) -> list[dict[str, np.ndarray]]:
    """Per-rank graph inputs for the forward or backward fragment.

    ``forward`` is the oracle forward result; the backward fragment reads its
    saved activations (recv_x, h, a).
    """
    out = []
    for r in range(plan.ep_size):
        d = {"w1": local_weights(problem["w1"], plan, r),
             "w2": local_weights(problem["w2"], plan, r)}
        if kind == "forward":
            d["x"] = problem["x"][r]
        else:
            if forward is None:
                raise ValueError("backward inputs need the forward activations")
            d["dy"] = problem["dy"][r]
            for name in ("recv_x", "h", "a"):
                d[name] = forward[name][r]
        out.append(d)
    return out


def _row_span(s):
    return (s.offsets[0], s.offsets[0] + s.extents[0])


class _Executor:
    def __init__(self, ct: CompiledTaskflow, inputs, dtype, fault: FaultHook | None):
        self.ct = ct
        self.plan = ct.plan
        self.dtype = np.dtype(dtype)
        self.fault = fault
        self.ranks: list[_RankState] = []
        for r, g in enumerate(ct.graphs):
            st = _RankState()
            given = inputs[r] if r < len(inputs) else {}
            graph_inputs = g.graph_inputs()
            for tid, t in g.tensors.items():
                if tid in graph_inputs:
                    if t.name in given:
                        arr = np.array(given[t.name], dtype=self.dtype, copy=True)
                    elif t.name in ("combine_offsets", "combine_sizes") and self.plan:
                        src = (self.plan.combine_offsets(r) if t.name == "combine_offsets"
                               else self.plan.combine_sizes(r))
                        arr = np.asarray(src, dtype=self.dtype)
                    else:
                        raise ShapeError(f"rank {r}: missing input tensor {t.name!r}")
                    if arr.shape != tuple(t.shape):
                        raise ShapeError(f"rank {r}: input {t.name!r} has shape {arr.shape}, "
                                         f"graph expects {t.shape}")
                    st.arrays[tid] = arr
                    st.written[tid] = np.ones(t.shape, dtype=bool)
                else:
                    st.arrays[tid] = np.zeros(t.shape, dtype=self.dtype)
                    st.written[tid] = np.zeros(t.shape, dtype=bool)
            self.ranks.append(st)

    # -- instrumented access -------------------------------------------------

    def read(self, rank: int, s, rows=None, who=None) -> np.ndarray:
        st = self.ranks[rank]
        idx = s.index() if rows is None else (rows,)
        if not st.written[s.tensor_id][idx].all():
            raise VerificationError(
                f"task {who} read tensor {s.tensor_id} on rank {rank} before it was produced")
        view = st.arrays[s.tensor_id][idx].view()
        view.flags.writeable = False
        return view

    def write(self, rank: int, s, value, rows=None) -> None:
        st = self.ranks[rank]
        idx = s.index() if rows is None else (rows,)
        target = st.arrays[s.tensor_id][idx]
        if np.shape(value) != target.shape:
            raise ShapeError(f"handler wrote {np.shape(value)} into slice {target.shape}")
        st.arrays[s.tensor_id][idx] = value
        st.written[s.tensor_id][idx] = True

    # -- handlers --------------------------------------------------------------

    def run(self, rank: int, i: int, td: TaskDescriptor) -> None:
        who = (rank, i)
        if td.task_type == PUT_MEM_SIGNAL:
            self.run_comm(rank, td, who)
        else:
            self.run_compute(rank, td, who)
        if self.fault is not None:
            target = td.trigger_rank if td.task_type == PUT_MEM_SIGNAL else rank
            self.fault(rank, i, td, self.ranks[target].arrays)

    def groups(self, rank: int, rows: int):
        if self.plan is not None:
            return self.plan.group_bounds(rank)
        return [(0, rows)]

    def run_compute(self, rank: int, td: TaskDescriptor, who) -> None:
        ins = [s for s in td.inputs if METADATA not in s.flags]
        out = td.outputs[0]
        kind = td.op_kind
        if kind in _FWD_GMM or kind in _GRAD_GMM:
            xs = next(s for s in ins if len(s.extents) == 2)
            ws = next(s for s in ins if len(s.extents) == 3)
            x = self.read(rank, xs, who=who)
            w = self.read(rank, ws, who=who)
            a, b = _row_span(xs)
            y = np.zeros((b - a, out.extents[1]), dtype=self.dtype)
            for j in range(ws.offsets[0], ws.offsets[0] + ws.extents[0]):
                g0, g1 = self.groups(rank, b)[j]
                lo, hi = max(a, g0), min(b, g1)
                if hi > lo:
                    wj = w[j - ws.offsets[0]]
                    y[lo - a:hi - a] = x[lo - a:hi - a] @ (wj.T if kind in _GRAD_GMM else wj)
            self.write(rank, out, y)
        elif kind in _WGRAD:
            xs, dys = ins[0], ins[1]
            x = self.read(rank, xs, who=who)
            dy = self.read(rank, dys, who=who)
            a, b = _row_span(xs)
            dw = np.zeros(out.extents, dtype=self.dtype)
            for j in range(out.offsets[0], out.offsets[0] + out.extents[0]):
                g0, g1 = self.groups(rank, b)[j]
                if g1 > g0 and (g0 < a or g1 > b):
                    raise VerificationError(f"task {who} covers only part of expert {j}'s rows")
                if g1 > g0:
                    dw[j - out.offsets[0]] = x[g0 - a:g1 - a].T @ dy[g0 - a:g1 - a]
            self.write(rank, out, dw)
        elif kind is K.SwiGLU:
            self.write(rank, out, swiglu(self.read(rank, ins[0], who=who)).astype(self.dtype))
        elif kind is K.SwiGLUGrad:
            da = self.read(rank, ins[0], who=who)
            h = self.read(rank, ins[1], who=who)
            self.write(rank, out, swiglu_grad(h, da).astype(self.dtype))
        elif kind is K.ElemAdd:
            self.write(rank, out, self.read(rank, ins[0], who=who) + self.read(rank, ins[1], who=who))
        else:
            raise VerificationError(f"no handler for {kind.value}")

    def run_comm(self, rank: int, td: TaskDescriptor, who) -> None:
        plan = self.plan
        P, L = plan.ep_size, plan.local_experts
        src = td.inputs[0]
        out = td.outputs[0]
        dst = td.comm.dst_rank
        if td.op_kind in (K.Dispatch, K.BwdDispatch):
            d, j = divmod(td.task_index, L)
            e = d * L + j
            toks = plan.tokens_for(rank, e)
            rows = self.read(rank, src, rows=toks, who=who)
            if td.op_kind is K.BwdDispatch:
                rows = rows * plan.weights_for(rank, e)[:, None].astype(self.dtype)
            self.write(dst, out, rows)
            return
        j, s = divmod(td.task_index, P)
        e = rank * L + j
        toks = plan.tokens_for(s, e)
        off = plan.block_offset(rank, j, s)
        if GATHER in src.flags or src.extents[0] != len(toks):
            block = self.read(rank, src, rows=slice(off, off + len(toks)), who=who)
        else:
            block = self.read(rank, src, who=who)
        if td.op_kind is K.Combine:
            block = block * plan.weights_for(s, e)[:, None].astype(self.dtype)
        st = self.ranks[dst]
        stage = st.staging.get(out.tensor_id)
        if stage is None:
            T, H = st.arrays[out.tensor_id].shape
            stage = st.staging[out.tensor_id] = np.zeros((T, plan.top_k, H), dtype=self.dtype)
        ks = [next(k for k, (ee, _) in enumerate(plan.routes[s][int(t)]) if ee == e) for t in toks]
        stage[toks, ks] = block
        # fixed route-order reduction: independent of block arrival order
        self.write(dst, out, stage[toks].sum(axis=1), rows=toks)


def taskflow_execute(ct: CompiledTaskflow, inputs: list[dict[str, np.ndarray]],
                     dtype=np.float32, cm: CostModel | None = None,
                     sim: SimResult | None = None, order: list[tuple[int, int]] | None = None,
                     fault: FaultHook | None = None) -> TaskflowResult:
    """Run every TD's handler in commit order (from ``sim``, or a fresh pipelined run)."""
    if order is None:
        if sim is None:
            sim = simulate(ct.sscs, cm or CostModel())
        order = sim.commit_order
    ex = _Executor(ct, inputs, dtype, fault)
    tds = ct.tds
    for rank, i in order:
        ex.run(rank, i, tds[rank][i])
    buffers = [
        {t.name: ex.ranks[r].arrays[tid] for tid, t in g.tensors.items()}
        for r, g in enumerate(ct.graphs)
    ]
    return TaskflowResult(buffers, list(order), sim, len(order))

