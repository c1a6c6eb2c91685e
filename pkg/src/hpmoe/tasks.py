"""Tile task generation: turn annotated operators into Task Descriptors."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import PropagationMissing, SliceError
from .graph import (
    COMM_KINDS, CUBE_KINDS, DISPATCH_KINDS, ODG, OperatorKind, OperatorNode,
    ResourceClass, ShapeConfig, TensorNode, resource_class, topological_sort,
)
from .routing import RoutingPlan, balanced_plan

PUT_MEM_SIGNAL = "PutMemSignal"
CTQ = "CTQ"
VTQ = "VTQ"

REMOTE_DST = "REMOTE_DST"
METADATA = "METADATA"
# rows addressed through routing metadata rather than a contiguous box
GATHER = "GATHER"
SCATTER = "SCATTER"
SLICE_FLAGS = frozenset({REMOTE_DST, METADATA, GATHER, SCATTER})


@dataclass(frozen=True)
class TensorSlice:
    tensor_id: int
    offsets: tuple[int, ...]
    extents: tuple[int, ...]
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "flags", frozenset(self.flags))
        if len(self.offsets) != len(self.extents):
            raise SliceError("offsets and extents differ in rank")
        if not self.flags <= SLICE_FLAGS:
            raise SliceError(f"unknown slice flags {sorted(self.flags - SLICE_FLAGS)}")

    @property
    def numel(self) -> int:
        n = 1
        for e in self.extents:
            n *= e
        return n

    @property
    def is_metadata(self) -> bool:
        return METADATA in self.flags

    def box(self) -> tuple[tuple[int, int], ...]:
        return tuple((o, o + e) for o, e in zip(self.offsets, self.extents))

    def index(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + e) for o, e in zip(self.offsets, self.extents))

    def intersection(self, other: TensorSlice) -> TensorSlice | None:
        if self.tensor_id != other.tensor_id or len(self.offsets) != len(other.offsets):
            return None
        offs, exts = [], []
        for (a0, a1), (b0, b1) in zip(self.box(), other.box()):
            lo, hi = max(a0, b0), min(a1, b1)
            if hi <= lo:
                return None
            offs.append(lo)
            exts.append(hi - lo)
        return TensorSlice(self.tensor_id, tuple(offs), tuple(exts))

    def check_bounds(self, shape: tuple[int, ...]) -> None:
        if len(shape) != len(self.offsets):
            raise SliceError(f"slice rank {len(self.offsets)} != tensor rank {len(shape)}")
        for d, (o, e) in enumerate(zip(self.offsets, self.extents)):
            if o < 0 or e < 0 or o + e > shape[d]:
                raise SliceError(
                    f"slice of tensor {self.tensor_id} out of bounds on dim {d}: "
                    f"[{o}, {o + e}) vs extent {shape[d]}")

    def to_dict(self) -> dict:
        return {"tensor_id": self.tensor_id, "offsets": list(self.offsets),
                "extents": list(self.extents), "flags": sorted(self.flags)}

    @classmethod
    def from_dict(cls, d: dict) -> TensorSlice:
        return cls(d["tensor_id"], tuple(d["offsets"]), tuple(d["extents"]), frozenset(d["flags"]))


@dataclass(frozen=True)
class CommInfo:
    dst_rank: int
    dst_tensor_id: int
    byte_count: int


@dataclass(frozen=True)
class TaskDescriptor:
    task_type: str
    queue_type: str
    inputs: tuple[TensorSlice, ...]
    outputs: tuple[TensorSlice, ...]
    task_index: int
    task_split_num: int
    task_split_value: int
    tiling_data_position: int
    op_id: int
    op_kind: OperatorKind
    rank: int = 0
    dependent_event: int | None = None
    trigger_events: tuple[int, ...] = ()
    comm: CommInfo | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "trigger_events", tuple(self.trigger_events))
        object.__setattr__(self, "op_kind", OperatorKind(self.op_kind))
        if not 0 <= self.task_index < self.task_split_num:
            raise SliceError(f"task_index {self.task_index} outside [0, {self.task_split_num})")
        if (self.comm is not None) != (self.task_type == PUT_MEM_SIGNAL):
            raise ValueError("comm info present iff task_type is PutMemSignal")

    @property
    def resource(self) -> ResourceClass:
        if self.task_type == PUT_MEM_SIGNAL:
            return ResourceClass.VECTOR
        return resource_class(OperatorKind(self.task_type))

    @property
    def trigger_rank(self) -> int:
        """Rank hosting the counters in ``trigger_events``."""
        return self.comm.dst_rank if self.comm is not None else self.rank

    def slice_rank(self, s: TensorSlice) -> int:
        return self.comm.dst_rank if (REMOTE_DST in s.flags and self.comm) else self.rank

    def to_dict(self) -> dict:
        d = {
            "task_type": self.task_type,
            "queue_type": self.queue_type,
            "dependent_event": self.dependent_event,
            "trigger_events": list(self.trigger_events),
            "inputs": [s.to_dict() for s in self.inputs],
            "outputs": [s.to_dict() for s in self.outputs],
            "task_index": self.task_index,
            "task_split_num": self.task_split_num,
            "task_split_value": self.task_split_value,
            "tiling_data_position": self.tiling_data_position,
            "op_id": self.op_id,
            "op_kind": self.op_kind.value,
            "rank": self.rank,
            "comm": None if self.comm is None else {
                "dst_rank": self.comm.dst_rank, "dst_tensor_id": self.comm.dst_tensor_id,
                "byte_count": self.comm.byte_count},
        }
        if len(self.trigger_events) == 1:
            d["trigger_event"] = self.trigger_events[0]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TaskDescriptor:
        comm = d.get("comm")
        trig = d.get("trigger_events")
        if trig is None:
            trig = [d["trigger_event"]] if d.get("trigger_event") is not None else []
        return cls(
            task_type=d["task_type"], queue_type=d["queue_type"],
            inputs=tuple(TensorSlice.from_dict(s) for s in d["inputs"]),
            outputs=tuple(TensorSlice.from_dict(s) for s in d["outputs"]),
            task_index=d["task_index"], task_split_num=d["task_split_num"],
            task_split_value=d["task_split_value"], tiling_data_position=d["tiling_data_position"],
            op_id=d["op_id"], op_kind=OperatorKind(d["op_kind"]), rank=d["rank"],
            dependent_event=d["dependent_event"], trigger_events=tuple(trig),
            comm=None if comm is None else CommInfo(comm["dst_rank"], comm["dst_tensor_id"],
                                                    comm["byte_count"]),
        )


def queue_for(task_type: str) -> str:
    if task_type == PUT_MEM_SIGNAL:
        return VTQ
    return CTQ if OperatorKind(task_type) in CUBE_KINDS else VTQ


def derive_slice(task_index: int, task_split_num: int, task_split_value: int,
                 tensor: TensorNode, split_dim: int) -> TensorSlice:
    """Uniform tile ``task_index`` of ``tensor`` along ``split_dim``.

    ``split_dim == -1`` is treated as dim 0 (unsplit tensors only ever have a
    single full-extent tile).
    """
    if not 0 <= task_index < task_split_num:
        raise SliceError(f"task_index {task_index} outside [0, {task_split_num})")
    dim = 0 if split_dim < 0 else split_dim
    if dim >= len(tensor.shape):
        raise SliceError(f"split dim {dim} invalid for tensor {tensor.id}")
    if task_split_num * task_split_value != tensor.shape[dim]:
        raise SliceError(
            f"{task_split_num} x {task_split_value} does not tile extent {tensor.shape[dim]} "
            f"of tensor {tensor.id}")
    offsets = [0] * len(tensor.shape)
    extents = list(tensor.shape)
    offsets[dim] = task_index * task_split_value
    extents[dim] = task_split_value
    return TensorSlice(tensor.id, tuple(offsets), tuple(extents))


def tile_bounds(n: int, extent: int,
                groups: list[tuple[int, int]] | None = None) -> list[tuple[int, int]]:
    """Row ranges of ``n`` tiles over ``extent`` rows.

    Expert-group boundaries are used when they cover the extent with exactly
    ``n`` groups (ragged tiles); otherwise tiles are uniform.
    """
    if n == 1:
        return [(0, extent)]
    if groups is not None and len(groups) == n and groups and groups[-1][1] == extent:
        return list(groups)
    if extent % n:
        raise SliceError(f"{extent} rows cannot be split into {n} uniform tiles")
    v = extent // n
    return [(k * v, (k + 1) * v) for k in range(n)]


def _expert_groups(g: ODG, plan: RoutingPlan | None, rank: int,
                   rows: int) -> list[tuple[int, int]] | None:
    c = g.shape_config
    if plan is not None:
        bounds = plan.group_bounds(rank)
        return bounds if bounds and bounds[-1][1] == rows else None
    if c is None:
        return None
    L = c.local_experts
    if rows % L:
        return None
    v = rows // L
    return [(j * v, (j + 1) * v) for j in range(L)]


def _experts_touching(a: int, b: int, groups, L: int) -> tuple[int, int]:
    if groups is None:
        return 0, L
    hit = [j for j, (s, e) in enumerate(groups) if s < b and a < e]
    if not hit:
        # empty range: attribute to the group starting at ``a``
        hit = [next((j for j, (s, _) in enumerate(groups) if s >= a), L - 1)]
    return hit[0], hit[-1] + 1


def _compute_tds(op: OperatorNode, g: ODG, plan: RoutingPlan | None, rank: int,
                 position: int) -> list[TaskDescriptor]:
    n = op.task_num
    row_inputs = [t for t in op.inputs if len(g.tensors[t].shape) == 2]
    row_ref = g.tensors[row_inputs[0]] if row_inputs else g.tensors[op.outputs[0]]
    R = row_ref.shape[0]
    groups = _expert_groups(g, plan, rank, R) if g.shape_config else None
    bounds = tile_bounds(n, R, groups)
    by_expert = groups is not None and bounds == list(groups) and n > 1
    L = g.shape_config.local_experts if g.shape_config else 1
    task_type = op.kind.value
    queue = queue_for(task_type)
    tds = []
    for k, (a, b) in enumerate(bounds):
        if n == 1:
            e0, e1 = 0, L
        elif by_expert:
            e0, e1 = k, k + 1
        else:
            e0, e1 = _experts_touching(a, b, groups, L)

        def slice_of(tid, flags=frozenset()):
            t = g.tensors[tid]
            if flags:
                return TensorSlice(tid, (0,) * len(t.shape), t.shape, flags)
            if len(t.shape) == 3:
                return TensorSlice(tid, (e0, 0, 0), (e1 - e0, t.shape[1], t.shape[2]))
            if len(t.shape) == 2 and t.shape[0] == R:
                return TensorSlice(tid, (a, 0), (b - a, t.shape[1]))
            return TensorSlice(tid, (0,) * len(t.shape), t.shape)

        ins = tuple(slice_of(t, frozenset({METADATA}) if i in op.spec.ignored_input_indices
                             else frozenset())
                    for i, t in enumerate(op.inputs))
        outs = tuple(slice_of(t) for t in op.outputs)
        for s in ins + outs:
            s.check_bounds(g.tensors[s.tensor_id].shape)
        tds.append(TaskDescriptor(
            task_type=task_type, queue_type=queue, inputs=ins, outputs=outs,
            task_index=k, task_split_num=n, task_split_value=b - a,
            tiling_data_position=position, op_id=op.id, op_kind=op.kind, rank=rank))
    return tds


def _comm_tds(op: OperatorNode, g: ODG, plan: RoutingPlan, rank: int,
              position: int) -> list[TaskDescriptor]:
    P, L = plan.ep_size, plan.local_experts
    width = g.tensors[op.inputs[0]].dtype.width
    meta = tuple(
        TensorSlice(t, (0,) * len(g.tensors[t].shape), g.tensors[t].shape, frozenset({METADATA}))
        for i, t in enumerate(op.inputs) if i in op.spec.ignored_input_indices)
    tds = []
    if op.kind in DISPATCH_KINDS:
        src = g.tensors[op.inputs[0]]
        dst = g.tensors[op.outputs[0]]
        H = dst.shape[1]
        for d in range(P):
            for j in range(L):
                cnt = plan.count(rank, d * L + j)
                if cnt == 0:
                    continue
                out = TensorSlice(dst.id, (plan.block_offset(d, j, rank), 0), (cnt, H),
                                  frozenset({REMOTE_DST}))
                out.check_bounds((plan.recv_rows(d), H))
                tds.append(TaskDescriptor(
                    task_type=PUT_MEM_SIGNAL, queue_type=VTQ,
                    inputs=(TensorSlice(src.id, (0, 0), src.shape, frozenset({GATHER})),) + meta,
                    outputs=(out,), task_index=d * L + j, task_split_num=P * L,
                    task_split_value=cnt, tiling_data_position=position, op_id=op.id,
                    op_kind=op.kind, rank=rank, comm=CommInfo(d, dst.id, cnt * H * width)))
    else:
        src = g.tensors[op.inputs[0]]
        dst = g.tensors[op.outputs[0]]
        H = src.shape[1]
        partitioned = (op.task_num or 1) > 1
        for j in range(L):
            for s in range(P):
                cnt = plan.count(s, rank * L + j)
                if cnt == 0:
                    continue
                if partitioned:
                    inp = TensorSlice(src.id, (plan.block_offset(rank, j, s), 0), (cnt, H))
                else:
                    inp = TensorSlice(src.id, (0, 0), src.shape)
                inp.check_bounds(src.shape)
                out = TensorSlice(dst.id, (0, 0), dst.shape, frozenset({REMOTE_DST, SCATTER}))
                tds.append(TaskDescriptor(
                    task_type=PUT_MEM_SIGNAL, queue_type=VTQ, inputs=(inp,) + meta,
                    outputs=(out,), task_index=j * P + s, task_split_num=L * P,
                    task_split_value=cnt, tiling_data_position=position, op_id=op.id,
                    op_kind=op.kind, rank=rank, comm=CommInfo(s, dst.id, cnt * H * width)))
    return tds


def fill_config(op: OperatorNode, g: ODG, c: ShapeConfig | None = None,
                plan: RoutingPlan | None = None, position: int | None = None) -> list[TaskDescriptor]:
    """Operator-specific expansion of one annotated operator into TDs.

    Compute operators yield exactly ``op.task_num`` descriptors.  Communication
    operators yield one PutMemSignal TD per non-empty (destination rank,
    expert block) region.
    """
    if op.task_num is None:
        raise PropagationMissing(f"operator {op.id} has no task_num; run propagation first")
    c = c or g.shape_config
    rank = c.rank_id if c is not None else 0
    if position is None:
        position = topological_sort(g).index(op.id)
    if op.kind in COMM_KINDS:
        if plan is None:
            plan = balanced_plan(c)
        return _comm_tds(op, g, plan, rank, position)
    return _compute_tds(op, g, plan, rank, position)


def generate_tasks(g: ODG, plan: RoutingPlan | None = None) -> list[TaskDescriptor]:
    """All TDs of an annotated graph in (topological op, task) order."""
    tds = []
    for pos, op_id in enumerate(topological_sort(g)):
        tds.extend(fill_config(g.operators[op_id], g, g.shape_config, plan, pos))
    return tds


def gmm_task_legality(td: TaskDescriptor, op: OperatorNode, g: ODG) -> list[str]:
    """Empty list iff the GMM task keeps reduction and weight dims whole."""
    violations = []
    if op.kind not in CUBE_KINDS:
        return [f"operator {op.id} is not a GMM-family operator"]
    for s in td.inputs + td.outputs:
        t = g.tensors[s.tensor_id]
        if len(t.shape) == 3:
            if s.extents[1:] != t.shape[1:] or s.offsets[1:] != (0, 0):
                violations.append(f"reduction dimension partitioned on weight tensor {t.id}")
        elif len(t.shape) == 2:
            if s.extents[1] != t.shape[1] or s.offsets[1] != 0:
                violations.append(f"reduction dimension partitioned on tensor {t.id}")
    return violations


def with_events(td: TaskDescriptor, dependent_event, trigger_events) -> TaskDescriptor:
    return replace(td, dependent_event=dependent_event, trigger_events=tuple(trigger_events))
