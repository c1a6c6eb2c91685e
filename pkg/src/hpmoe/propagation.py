"""Split propagation over an ODG.

Walks operators in topological order, evaluates each operator's task-count
policy, checks inherited partitions and writes split labels onto outputs.  An
operator whose required input partitions are missing falls back to a single
unsplit task.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import SplitPolicyError, StaleResultError
from .graph import ODG, OperatorNode, ShapeConfig, TaskNumPolicy, ensure_valid, topological_sort


@dataclass(frozen=True)
class PropagationResult:
    task_num_by_op: dict[int, int]
    labels_by_tensor: dict[int, tuple[int, int]]
    fallback_ops: frozenset[int]
    graph_fingerprint: str
    # tensors labelled (-1, n>1): consumers treat them as unsplit
    unlabeled_multi_task: frozenset[int] = field(default_factory=frozenset)

    def __eq__(self, other):
        if not isinstance(other, PropagationResult):
            return NotImplemented
        return (self.task_num_by_op == other.task_num_by_op
                and self.labels_by_tensor == other.labels_by_tensor
                and self.fallback_ops == other.fallback_ops
                and self.graph_fingerprint == other.graph_fingerprint)


def evaluate_policy(policy: TaskNumPolicy, op: OperatorNode, g: ODG,
                    labels: dict[int, tuple[int, int]], c: ShapeConfig) -> int:
    """Evaluate ``task_num_fn(C)`` for one operator."""
    kind = policy.policy
    if kind == "fixed":
        return policy.value
    if kind == "per_dest_rank":
        return c.ep_size
    split_inputs = op.spec.split_inputs
    if kind == "per_expert_block":
        if policy.value is None:
            return c.local_experts
        if split_inputs:
            i, dim = split_inputs[0]
            ref = g.tensors[op.inputs[i]]
        else:
            dim = 0
            ref = g.tensors[op.inputs[0] if op.inputs else op.outputs[0]]
        rows = ref.shape[dim]
        if rows == 0 or rows % policy.value:
            raise SplitPolicyError(
                f"operator {op.id} ({op.kind.value}): {rows} rows not divisible into "
                f"blocks of {policy.value}")
        return rows // policy.value
    # inherit_input_split
    if not split_inputs:
        raise SplitPolicyError(
            f"operator {op.id} ({op.kind.value}): InheritInputSplit needs split_inputs")
    i, _ = split_inputs[0]
    return labels[op.inputs[i]][1]


def propagate(g: ODG, c: ShapeConfig | None = None) -> PropagationResult:
    ensure_valid(g)
    c = c or g.shape_config
    labels = {t: (-1, 1) for t in g.tensors}
    task_num: dict[int, int] = {}
    fallback: set[int] = set()
    for op_id in topological_sort(g):
        op = g.operators[op_id]
        spec = op.spec
        if spec.split_inputs is None:
            n = evaluate_policy(spec.task_num_policy, op, g, labels, c)
        elif all(labels[op.inputs[i]][0] == d for i, d in spec.split_inputs
                 if i not in spec.ignored_input_indices):
            n = evaluate_policy(spec.task_num_policy, op, g, labels, c)
        else:
            n = 1
            fallback.add(op_id)
        if n < 1:
            raise SplitPolicyError(f"operator {op_id}: non-positive task count {n}")
        task_num[op_id] = n
        for j, y in enumerate(op.outputs):
            d = spec.split_output_dims[j]
            labels[y] = (d, n) if n > 1 and d >= 0 else (-1, n)
    unlabeled = frozenset(t for t, (d, n) in labels.items() if d < 0 and n > 1)
    return PropagationResult(task_num, labels, frozenset(fallback), g.fingerprint(), unlabeled)


def annotate(g: ODG, r: PropagationResult) -> ODG:
    """Return a copy of ``g`` with task counts and tensor labels filled in."""
    if r.graph_fingerprint != g.fingerprint():
        raise StaleResultError("propagation result was computed for a different graph")
    tensors = {
        tid: replace(t, split_dim=r.labels_by_tensor[tid][0], split_num=r.labels_by_tensor[tid][1])
        for tid, t in g.tensors.items()
    }
    ops = {oid: replace(o, task_num=r.task_num_by_op[oid]) for oid, o in g.operators.items()}
    return ODG(tensors, ops, g.shape_config, g.name)


def propagate_and_annotate(g: ODG, c: ShapeConfig | None = None) -> tuple[ODG, PropagationResult]:
    r = propagate(g, c)
    return annotate(g, r), r
