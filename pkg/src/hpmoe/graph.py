"""Operator dependency graph (ODG): tensors, operators, split rules and builders.

Tensors are single-assignment dataflow edges; operators consume and produce
them.  Every operator carries a :class:`SplitSpec` describing which input
partition it inherits, where its output partition continues, and how many tile
tasks it produces.  Builders construct the MoE-FFN forward/backward fragments
and the SwiGLU+Add microbenchmark chain.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Iterable

from .errors import ConfigError, CyclicGraph, DanglingReference, GraphValidationError


class DType(str, enum.Enum):
    F32 = "F32"
    F64 = "F64"

    @property
    def width(self) -> int:
        return 4 if self is DType.F32 else 8


class OperatorKind(str, enum.Enum):
    Dispatch = "Dispatch"
    GMM1 = "GMM1"
    SwiGLU = "SwiGLU"
    GMM2 = "GMM2"
    Combine = "Combine"
    BwdDispatch = "BwdDispatch"
    GmmActGrad = "GmmActGrad"
    GmmW2Grad = "GmmW2Grad"
    SwiGLUGrad = "SwiGLUGrad"
    GmmGateGrad = "GmmGateGrad"
    GmmW1Grad = "GmmW1Grad"
    BwdCombine = "BwdCombine"
    ElemAdd = "ElemAdd"


class ResourceClass(str, enum.Enum):
    CUBE = "CUBE"
    VECTOR = "VECTOR"


CUBE_KINDS = frozenset({
    OperatorKind.GMM1, OperatorKind.GMM2, OperatorKind.GmmActGrad,
    OperatorKind.GmmW2Grad, OperatorKind.GmmGateGrad, OperatorKind.GmmW1Grad,
})
COMM_KINDS = frozenset({
    OperatorKind.Dispatch, OperatorKind.Combine,
    OperatorKind.BwdDispatch, OperatorKind.BwdCombine,
})
# Dispatch-direction ops send source tokens to expert hosts; combine-direction
# ops return expert rows to the token's source rank.
DISPATCH_KINDS = frozenset({OperatorKind.Dispatch, OperatorKind.BwdDispatch})
COMBINE_KINDS = frozenset({OperatorKind.Combine, OperatorKind.BwdCombine})
WEIGHT_GRAD_KINDS = frozenset({OperatorKind.GmmW2Grad, OperatorKind.GmmW1Grad})


def resource_class(kind: OperatorKind) -> ResourceClass:
    return ResourceClass.CUBE if OperatorKind(kind) in CUBE_KINDS else ResourceClass.VECTOR


@dataclass(frozen=True)
class TaskNumPolicy:
    """Declarative task-count rule.

    ``per_expert_block`` with ``value=None`` yields one tile per local expert;
    with an integer it yields ``rows // value`` uniform tiles and requires exact
    divisibility.
    """

    policy: str
    value: int | None = None

    KINDS = ("fixed", "per_dest_rank", "per_expert_block", "inherit_input_split")

    def __post_init__(self):
        if self.policy not in self.KINDS:
            raise ConfigError(f"unknown task-number policy {self.policy!r}")
        if self.policy == "fixed" and (self.value is None or self.value < 1):
            raise ConfigError("Fixed policy needs a positive task count")
        if self.policy == "per_expert_block" and self.value is not None and self.value < 1:
            raise ConfigError("PerExpertBlock rows_per_tile must be positive")

    @classmethod
    def fixed(cls, n: int) -> TaskNumPolicy:
        return cls("fixed", n)

    @classmethod
    def per_dest_rank(cls) -> TaskNumPolicy:
        return cls("per_dest_rank")

    @classmethod
    def per_expert_block(cls, rows_per_tile: int | None = None) -> TaskNumPolicy:
        return cls("per_expert_block", rows_per_tile)

    @classmethod
    def inherit_input_split(cls) -> TaskNumPolicy:
        return cls("inherit_input_split")


@dataclass(frozen=True)
class SplitSpec:
    split_inputs: tuple[tuple[int, int], ...] | None
    split_output_dims: tuple[int, ...]
    task_num_policy: TaskNumPolicy
    ignored_input_indices: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.split_inputs is not None:
            object.__setattr__(self, "split_inputs", tuple(tuple(p) for p in self.split_inputs))
        object.__setattr__(self, "split_output_dims", tuple(self.split_output_dims))
        object.__setattr__(self, "ignored_input_indices", frozenset(self.ignored_input_indices))


@dataclass(frozen=True)
class TensorNode:
    id: int
    name: str
    shape: tuple[int, ...]
    dtype: DType = DType.F32
    split_dim: int = -1
    split_num: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "dtype", DType(self.dtype))

    @property
    def numel(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


@dataclass(frozen=True)
class OperatorNode:
    id: int
    kind: OperatorKind
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    spec: SplitSpec
    task_num: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OperatorKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @property
    def resource(self) -> ResourceClass:
        return resource_class(self.kind)


@dataclass(frozen=True)
class ShapeConfig:
    seq_len: int = 16
    microbatch: int = 1
    hidden: int = 32
    intermediate: int = 16
    top_k: int = 2
    total_experts: int = 4
    ep_size: int = 1
    local_experts: int = 4
    rank_id: int = 0

    @property
    def tokens(self) -> int:
        return self.seq_len * self.microbatch

    def validate(self) -> ShapeConfig:
        for name in ("seq_len", "microbatch", "hidden", "intermediate", "top_k",
                     "total_experts", "ep_size", "local_experts"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.total_experts != self.ep_size * self.local_experts:
            raise ConfigError(
                f"total_experts ({self.total_experts}) != ep_size*local_experts "
                f"({self.ep_size}*{self.local_experts})")
        if self.top_k > self.total_experts:
            raise ConfigError(f"top_k ({self.top_k}) exceeds total_experts ({self.total_experts})")
        if not 0 <= self.rank_id < self.ep_size:
            raise ConfigError(f"rank_id {self.rank_id} outside [0, {self.ep_size})")
        return self

    def for_rank(self, rank: int) -> ShapeConfig:
        return replace(self, rank_id=rank).validate()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> ShapeConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ODG:
    tensors: dict[int, TensorNode]
    operators: dict[int, OperatorNode]
    shape_config: ShapeConfig | None = None
    name: str = "odg"

    def producer_map(self) -> dict[int, list[int]]:
        prod: dict[int, list[int]] = {}
        for op in self.operators.values():
            for t in op.outputs:
                prod.setdefault(t, []).append(op.id)
        return prod

    def consumer_map(self) -> dict[int, list[int]]:
        cons: dict[int, list[int]] = {}
        for op in self.operators.values():
            for t in op.inputs:
                cons.setdefault(t, []).append(op.id)
        return cons

    def producer_of(self, tensor_id: int) -> int | None:
        ps = self.producer_map().get(tensor_id, [])
        return ps[0] if ps else None

    def graph_inputs(self) -> set[int]:
        prod = self.producer_map()
        return {t for t in self.tensors if t not in prod}

    def op_by_kind(self, kind: OperatorKind) -> OperatorNode | None:
        for op in self.operators.values():
            if op.kind == kind:
                return op
        return None

    def successors(self, op_id: int) -> set[int]:
        cons = self.consumer_map()
        out: set[int] = set()
        for t in self.operators[op_id].outputs:
            out.update(cons.get(t, []))
        return out

    def fingerprint(self) -> str:
        """Hash of the structure, ignoring split labels and task counts."""
        doc = {
            "tensors": [[t.id, t.name, list(t.shape), t.dtype.value]
                        for t in sorted(self.tensors.values(), key=lambda t: t.id)],
            "operators": [[o.id, o.kind.value, list(o.inputs), list(o.outputs),
                           _spec_to_dict(o.spec)]
                          for o in sorted(self.operators.values(), key=lambda o: o.id)],
            "shape_config": self.shape_config.to_dict() if self.shape_config else None,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def without_operator(self, op_id: int) -> ODG:
        ops = {k: v for k, v in self.operators.items() if k != op_id}
        used = {t for o in ops.values() for t in o.inputs + o.outputs}
        tensors = {k: v for k, v in self.tensors.items() if k in used}
        return ODG(tensors, ops, self.shape_config, self.name)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _op_edges(g: ODG) -> dict[int, set[int]]:
    prod = g.producer_map()
    edges: dict[int, set[int]] = {o: set() for o in g.operators}
    for op in g.operators.values():
        for t in op.inputs:
            for p in prod.get(t, []):
                if p != op.id:
                    edges[p].add(op.id)
                else:
                    edges[p].add(p)
    return edges


def _find_cycle(edges: dict[int, set[int]]) -> list[int] | None:
    color = dict.fromkeys(edges, 0)
    parent: dict[int, int] = {}
    for root in sorted(edges):
        if color[root]:
            continue
        stack = [(root, iter(sorted(edges[root])))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                continue
            if color[nxt] == 0:
                color[nxt] = 1
                parent[nxt] = node
                stack.append((nxt, iter(sorted(edges[nxt]))))
            elif color[nxt] == 1:
                cyc = [node]
                while cyc[-1] != nxt:
                    cyc.append(parent[cyc[-1]])
                cyc.reverse()
                return cyc + [nxt]
    return None


def _check_shapes(op: OperatorNode, g: ODG) -> list[str]:
    """Declared shape signatures per operator kind."""
    ins = [g.tensors[t].shape for t in op.inputs]
    outs = [g.tensors[t].shape for t in op.outputs]
    k = op.kind
    bad = []

    def need(cond, what):
        if not cond:
            bad.append(f"operator {op.id} ({k.value}): shape mismatch, {what}")

    try:
        if k in (OperatorKind.GMM1, OperatorKind.GMM2):
            x, w = ins[0], ins[1]
            need(len(x) == 2 and len(w) == 3 and x[1] == w[1], "x[R,K] vs w[L,K,N]")
            need(outs[0] == (x[0], w[2]), "y must be [R,N]")
        elif k in (OperatorKind.GmmActGrad, OperatorKind.GmmGateGrad):
            dy, w = ins[0], ins[1]
            need(len(dy) == 2 and len(w) == 3 and dy[1] == w[2], "dy[R,N] vs w[L,K,N]")
            need(outs[0] == (dy[0], w[1]), "dx must be [R,K]")
        elif k in WEIGHT_GRAD_KINDS:
            x, dy = ins[0], ins[1]
            need(len(x) == 2 and len(dy) == 2 and x[0] == dy[0], "row counts of x and dy")
            need(len(outs[0]) == 3 and outs[0][1:] == (x[1], dy[1]), "dW must be [L,K,N]")
        elif k == OperatorKind.SwiGLU:
            h = ins[0]
            need(len(h) == 2 and h[1] % 2 == 0, "even column count")
            need(outs[0] == (h[0], h[1] // 2), "a must be [R, C/2]")
        elif k == OperatorKind.SwiGLUGrad:
            da, h = ins[0], ins[1]
            need(h == (da[0], 2 * da[1]), "h must be [R, 2*I]")
            need(outs[0] == h, "dh must match h")
        elif k == OperatorKind.ElemAdd:
            need(all(s == ins[0] for s in ins) and outs[0] == ins[0], "operands must match")
        elif k in DISPATCH_KINDS:
            need(ins[0][-1] == outs[0][-1], "hidden width preserved")
        elif k in COMBINE_KINDS:
            need(ins[0][-1] == outs[0][-1], "hidden width preserved")
    except IndexError:
        bad.append(f"operator {op.id} ({k.value}): wrong arity")
    return bad


def validate_graph(g: ODG) -> ValidationReport:
    """Structural validation.  Raises on dangling ids and cycles."""
    report = ValidationReport()
    for op in g.operators.values():
        for t in op.inputs + op.outputs:
            if t not in g.tensors:
                raise DanglingReference(f"operator {op.id} references unknown tensor {t}")
        if len(set(op.outputs)) != len(op.outputs):
            report.violations.append(f"operator {op.id} lists an output twice")
    for t in g.tensors.values():
        if any(s < 0 for s in t.shape):
            report.violations.append(f"tensor {t.id} has a negative extent")
        if t.split_num < 1:
            report.violations.append(f"tensor {t.id}: split_num must be >= 1")
        if t.split_dim >= len(t.shape) or t.split_dim < -1:
            report.violations.append(f"tensor {t.id}: split_dim out of range")
    for t, ps in sorted(g.producer_map().items()):
        if len(ps) > 1:
            report.violations.append(f"multiple producers for tensor {t}: {sorted(ps)}")
    cyc = _find_cycle(_op_edges(g))
    if cyc is not None:
        names = " -> ".join(g.operators[o].kind.value for o in cyc)
        raise CyclicGraph(f"operator cycle: {names}", witness=cyc)
    for op in g.operators.values():
        s = op.spec
        if len(s.split_output_dims) != len(op.outputs):
            report.violations.append(f"operator {op.id}: split_output_dims length != outputs")
        for j, d in enumerate(s.split_output_dims):
            if j < len(op.outputs) and d >= len(g.tensors[op.outputs[j]].shape):
                report.violations.append(f"operator {op.id}: output {j} split dim {d} out of range")
        for i, d in s.split_inputs or ():
            if i in s.ignored_input_indices:
                continue
            if not 0 <= i < len(op.inputs):
                report.violations.append(f"operator {op.id}: split input index {i} out of range")
            elif not 0 <= d < len(g.tensors[op.inputs[i]].shape):
                report.violations.append(f"operator {op.id}: split dim {d} invalid for input {i}")
        report.violations.extend(_check_shapes(op, g))
    return report


def ensure_valid(g: ODG) -> ODG:
    report = validate_graph(g)
    if not report.ok:
        raise GraphValidationError(report.violations)
    return g


def topological_sort(g: ODG) -> list[int]:
    """Kahn's algorithm with ascending-id tie breaking."""
    edges = _op_edges(g)
    indeg = dict.fromkeys(edges, 0)
    for src, dsts in edges.items():
        for d in dsts:
            indeg[d] += 1
    heap = [o for o, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        o = heapq.heappop(heap)
        order.append(o)
        for d in edges[o]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    if len(order) != len(edges):
        cyc = _find_cycle(edges) or []
        raise CyclicGraph("operator graph contains a cycle", witness=cyc)
    return order


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _graph(name, cfg, tensors: Iterable[TensorNode], ops: Iterable[OperatorNode]) -> ODG:
    g = ODG({t.id: t for t in tensors}, {o.id: o for o in ops}, cfg, name)
    return ensure_valid(g)


def _recv_rows(c: ShapeConfig, recv_rows: int | None) -> int:
    # balanced routing: every rank receives tokens*top_k rows
    return c.tokens * c.top_k if recv_rows is None else int(recv_rows)


def build_forward_moe_ffn(c: ShapeConfig, recv_rows: int | None = None,
                          dtype: DType = DType.F32) -> ODG:
    """Dispatch -> GMM1 -> SwiGLU -> GMM2 -> Combine for one rank."""
    c = c.validate()
    T, H, I, L, P = c.tokens, c.hidden, c.intermediate, c.local_experts, c.ep_size
    R = _recv_rows(c, recv_rows)
    tensors = [
        TensorNode(0, "x", (T, H), dtype),
        TensorNode(1, "w1", (L, H, 2 * I), dtype),
        TensorNode(2, "recv_x", (R, H), dtype),
        TensorNode(3, "h", (R, 2 * I), dtype),
        TensorNode(4, "w2", (L, I, H), dtype),
        TensorNode(5, "a", (R, I), dtype),
        TensorNode(6, "y", (R, H), dtype),
        TensorNode(7, "combine_offsets", (P,), dtype),
        TensorNode(8, "combine_sizes", (P,), dtype),
        TensorNode(9, "out", (T, H), dtype),
    ]
    rows = [(0, 0)]
    ops = [
        OperatorNode(0, OperatorKind.Dispatch, (0,), (2,),
                     SplitSpec(None, (0,), TaskNumPolicy.per_dest_rank())),
        OperatorNode(1, OperatorKind.GMM1, (2, 1), (3,),
                     SplitSpec(rows, (0,), TaskNumPolicy.per_expert_block())),
        OperatorNode(2, OperatorKind.SwiGLU, (3,), (5,),
                     SplitSpec(rows, (0,), TaskNumPolicy.inherit_input_split())),
        OperatorNode(3, OperatorKind.GMM2, (5, 4), (6,),
                     SplitSpec(rows, (0,), TaskNumPolicy.per_expert_block())),
        OperatorNode(4, OperatorKind.Combine, (6, 7, 8), (9,),
                     SplitSpec(rows, (-1,), TaskNumPolicy.inherit_input_split(), {1, 2})),
    ]
    return _graph("forward", c, tensors, ops)


def build_backward_moe_ffn(c: ShapeConfig, recv_rows: int | None = None,
                           dtype: DType = DType.F32) -> ODG:
    """Seven-node backward fragment for one rank.

    BwdDispatch sends the routing-weighted output gradient to expert hosts;
    BwdCombine returns the input-activation gradient to token sources.
    """
    c = c.validate()
    T, H, I, L, P = c.tokens, c.hidden, c.intermediate, c.local_experts, c.ep_size
    R = _recv_rows(c, recv_rows)
    tensors = [
        TensorNode(0, "dy", (T, H), dtype),
        TensorNode(1, "dy_recv", (R, H), dtype),
        TensorNode(2, "w2", (L, I, H), dtype),
        TensorNode(3, "da", (R, I), dtype),
        TensorNode(4, "a", (R, I), dtype),
        TensorNode(5, "dw2", (L, I, H), dtype),
        TensorNode(6, "h", (R, 2 * I), dtype),
        TensorNode(7, "dh", (R, 2 * I), dtype),
        TensorNode(8, "w1", (L, H, 2 * I), dtype),
        TensorNode(9, "dx_recv", (R, H), dtype),
        TensorNode(10, "recv_x", (R, H), dtype),
        TensorNode(11, "dw1", (L, H, 2 * I), dtype),
        TensorNode(12, "combine_offsets", (P,), dtype),
        TensorNode(13, "combine_sizes", (P,), dtype),
        TensorNode(14, "dx", (T, H), dtype),
    ]
    rows = [(0, 0)]
    second_rows = [(1, 0)]
    expert = TaskNumPolicy.per_expert_block()
    ops = [
        OperatorNode(0, OperatorKind.BwdDispatch, (0,), (1,),
                     SplitSpec(None, (0,), TaskNumPolicy.per_dest_rank())),
        OperatorNode(1, OperatorKind.GmmActGrad, (1, 2), (3,), SplitSpec(rows, (0,), expert)),
        OperatorNode(2, OperatorKind.GmmW2Grad, (4, 1), (5,), SplitSpec(second_rows, (0,), expert)),
        OperatorNode(3, OperatorKind.SwiGLUGrad, (3, 6), (7,),
                     SplitSpec(rows, (0,), TaskNumPolicy.inherit_input_split())),
        OperatorNode(4, OperatorKind.GmmGateGrad, (7, 8), (9,), SplitSpec(rows, (0,), expert)),
        OperatorNode(5, OperatorKind.GmmW1Grad, (10, 7), (11,), SplitSpec(second_rows, (0,), expert)),
        OperatorNode(6, OperatorKind.BwdCombine, (9, 12, 13), (14,),
                     SplitSpec(rows, (-1,), TaskNumPolicy.inherit_input_split(), {1, 2})),
    ]
    return _graph("backward", c, tensors, ops)


def build_swiglu_add_chain(m: int, hidden_in: int, rows_per_tile: int | None = None,
                           dtype: DType = DType.F32) -> ODG:
    """SwiGLU([m, hidden_in]) -> ElemAdd([m, hidden_in/2] + residual)."""
    if m < 1 or hidden_in < 2:
        raise ConfigError("swiglu_add chain needs m >= 1 and hidden_in >= 2")
    if hidden_in % 2:
        raise ConfigError(f"hidden_in must be even, got {hidden_in}")
    half = hidden_in // 2
    policy = (TaskNumPolicy.fixed(1) if rows_per_tile is None
              else TaskNumPolicy.per_expert_block(rows_per_tile))
    tensors = [
        TensorNode(0, "h", (m, hidden_in), dtype),
        TensorNode(1, "a", (m, half), dtype),
        TensorNode(2, "residual", (m, half), dtype),
        TensorNode(3, "out", (m, half), dtype),
    ]
    ops = [
        OperatorNode(0, OperatorKind.SwiGLU, (0,), (1,), SplitSpec(None, (0,), policy)),
        OperatorNode(1, OperatorKind.ElemAdd, (1, 2), (3,),
                     SplitSpec([(0, 0)], (0,), TaskNumPolicy.inherit_input_split())),
    ]
    cfg = ShapeConfig(seq_len=m, microbatch=1, hidden=half, intermediate=half, top_k=1,
                      total_experts=1, ep_size=1, local_experts=1)
    return _graph("swiglu_add", cfg, tensors, ops)


GRAPH_BUILDERS = {
    "forward": build_forward_moe_ffn,
    "backward": build_backward_moe_ffn,
}


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def _spec_to_dict(s: SplitSpec) -> dict:
    return {
        "split_inputs": None if s.split_inputs is None else [list(p) for p in s.split_inputs],
        "split_output_dims": list(s.split_output_dims),
        "task_num_policy": {"policy": s.task_num_policy.policy, "value": s.task_num_policy.value},
        "ignored_input_indices": sorted(s.ignored_input_indices),
    }


def _spec_from_dict(d: dict) -> SplitSpec:
    pol = d["task_num_policy"]
    return SplitSpec(
        None if d["split_inputs"] is None else [tuple(p) for p in d["split_inputs"]],
        tuple(d["split_output_dims"]),
        TaskNumPolicy(pol["policy"], pol.get("value")),
        frozenset(d.get("ignored_input_indices", ())),
    )


def graph_to_dict(g: ODG) -> dict:
    return {
        "tensors": [
            {"id": t.id, "name": t.name, "shape": list(t.shape), "dtype": t.dtype.value,
             "split_dim": t.split_dim, "split_num": t.split_num}
            for t in sorted(g.tensors.values(), key=lambda t: t.id)
        ],
        "operators": [
            {"id": o.id, "kind": o.kind.value, "inputs": list(o.inputs), "outputs": list(o.outputs),
             "spec": _spec_to_dict(o.spec), "task_num": o.task_num}
            for o in sorted(g.operators.values(), key=lambda o: o.id)
        ],
        "shape_config": g.shape_config.to_dict() if g.shape_config else None,
    }


def graph_to_json(g: ODG) -> str:
    return json.dumps(graph_to_dict(g), sort_keys=True, indent=1)


def graph_from_dict(doc: dict, name: str = "odg") -> ODG:
    tensors = {
        t["id"]: TensorNode(t["id"], t["name"], tuple(t["shape"]), DType(t["dtype"]),
                            t.get("split_dim", -1), t.get("split_num", 1))
        for t in doc["tensors"]
    }
    ops = {
        o["id"]: OperatorNode(o["id"], OperatorKind(o["kind"]), tuple(o["inputs"]),
                              tuple(o["outputs"]), _spec_from_dict(o["spec"]), o.get("task_num"))
        for o in doc["operators"]
    }
    cfg = ShapeConfig.from_dict(doc["shape_config"]) if doc.get("shape_config") else None
    return ensure_valid(ODG(tensors, ops, cfg, name))


def graph_from_json(text: str) -> ODG:
    return graph_from_dict(json.loads(text))
