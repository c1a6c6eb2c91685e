"""Float64 reference implementation of the MoE-FFN forward and backward chains.

Tensors are kept per EP rank as plain numpy arrays.  Global expert weights
have shape ``[E, H, 2I]`` (w1) and ``[E, I, H]`` (w2); rank ``d`` hosts
experts ``d*L .. d*L+L-1``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import RoutingError, ShapeError
from .routing import RoutingPlan


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def silu(z):
    return z * _sigmoid(z)


def gmm(x: np.ndarray, group_list, w: np.ndarray, transpose_w: bool = False) -> np.ndarray:
    """Grouped matmul: ``y[rows_e] = x[rows_e] @ W_e`` with cumulative ``group_list``."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"gmm expects 2D x and 3D weights, got {x.shape} and {w.shape}")
    group_list = [int(v) for v in group_list]
    if len(group_list) != w.shape[0]:
        raise ShapeError(f"{len(group_list)} groups for {w.shape[0]} weight matrices")
    if any(b < a for a, b in zip([0] + group_list, group_list)) or (
            group_list and group_list[-1] > x.shape[0]):
        raise ShapeError(f"group_list {group_list} inconsistent with {x.shape[0]} rows")
    k_in, n_out = (w.shape[2], w.shape[1]) if transpose_w else (w.shape[1], w.shape[2])
    if x.shape[1] != k_in:
        raise ShapeError(f"x has {x.shape[1]} columns, weights expect {k_in}")
    y = np.zeros((x.shape[0], n_out), dtype=np.result_type(x, w))
    lo = 0
    for e, hi in enumerate(group_list):
        if hi > lo:
            y[lo:hi] = x[lo:hi] @ (w[e].T if transpose_w else w[e])
        lo = hi
    return y


def gmm_weight_grad(x: np.ndarray, dy: np.ndarray, group_list) -> np.ndarray:
    """Per-group ``dW_e = x[rows_e]^T @ dy[rows_e]``."""
    if x.shape[0] != dy.shape[0]:
        raise ShapeError(f"row mismatch {x.shape} vs {dy.shape}")
    out = np.zeros((len(group_list), x.shape[1], dy.shape[1]), dtype=np.result_type(x, dy))
    lo = 0
    for e, hi in enumerate(group_list):
        if hi > lo:
            out[e] = x[lo:hi].T @ dy[lo:hi]
        lo = hi
    return out


def _split_gate_up(h):
    if h.shape[-1] % 2:
        raise ShapeError(f"SwiGLU input needs an even column count, got {h.shape[-1]}")
    half = h.shape[-1] // 2
    return h[..., :half], h[..., half:]


def swiglu(h: np.ndarray) -> np.ndarray:
    gate, up = _split_gate_up(np.asarray(h))
    return silu(gate) * up


def swiglu_grad(h: np.ndarray, da: np.ndarray) -> np.ndarray:
    gate, up = _split_gate_up(np.asarray(h))
    s = _sigmoid(gate)
    dgate = da * up * s * (1.0 + gate * (1.0 - s))
    dup = da * gate * s
    return np.concatenate([dgate, dup], axis=-1)


def dispatch_permute(tokens_by_rank, plan: RoutingPlan, weighted: bool = False) -> list[np.ndarray]:
    """Gather token rows into each destination's expert-major receive layout."""
    P, L = plan.ep_size, plan.local_experts
    if len(tokens_by_rank) != P:
        raise RoutingError(f"expected {P} ranks of tokens, got {len(tokens_by_rank)}")
    for x in tokens_by_rank:
        if x.shape[0] != plan.tokens:
            raise RoutingError(f"plan has {plan.tokens} tokens per rank, buffer has {x.shape[0]}")
    H = tokens_by_rank[0].shape[1]
    out = []
    for d in range(P):
        buf = np.zeros((plan.recv_rows(d), H), dtype=tokens_by_rank[0].dtype)
        for j in range(L):
            e = d * L + j
            for s in range(P):
                toks = plan.tokens_for(s, e)
                if len(toks) == 0:
                    continue
                rows = tokens_by_rank[s][toks]
                if weighted:
                    rows = rows * plan.weights_for(s, e)[:, None]
                off = plan.block_offset(d, j, s)
                buf[off:off + len(toks)] = rows
        out.append(buf)
    return out


def _route_slot(plan: RoutingPlan, src: int) -> dict[tuple[int, int], int]:
    """(token, expert) -> position k of that expert in the token's route."""
    return {(t, e): k for t, route in enumerate(plan.routes[src]) for k, (e, _) in enumerate(route)}


def combine_reduce(expert_out_by_rank, plan: RoutingPlan, weighted: bool = True) -> list[np.ndarray]:
    """Scatter-add expert rows back to their source tokens.

    Contributions are summed in route order (k = 0..top_k-1) so the result
    does not depend on the order blocks arrive in.
    """
    P, L, K = plan.ep_size, plan.local_experts, plan.top_k
    if len(expert_out_by_rank) != P:
        raise RoutingError(f"expected {P} ranks of expert output, got {len(expert_out_by_rank)}")
    H = expert_out_by_rank[0].shape[1]
    dtype = expert_out_by_rank[0].dtype
    out = []
    for s in range(P):
        slots = np.zeros((plan.tokens, K, H), dtype=dtype)
        slot_of = _route_slot(plan, s)
        for d in range(P):
            y = expert_out_by_rank[d]
            if y.shape[0] != plan.recv_rows(d):
                raise RoutingError(f"rank {d} expert output has {y.shape[0]} rows, "
                                   f"plan expects {plan.recv_rows(d)}")
            for j in range(L):
                e = d * L + j
                toks = plan.tokens_for(s, e)
                if len(toks) == 0:
                    continue
                off = plan.block_offset(d, j, s)
                rows = y[off:off + len(toks)]
                if weighted:
                    rows = rows * plan.weights_for(s, e)[:, None]
                ks = [slot_of[(int(t), e)] for t in toks]
                slots[toks, ks] = rows
        out.append(slots.sum(axis=1))
    return out


def local_weights(w: np.ndarray, plan: RoutingPlan, rank: int) -> np.ndarray:
    L = plan.local_experts
    return w[rank * L:(rank + 1) * L]


def _check_weights(w1, w2, plan, H):
    E = plan.total_experts
    if w1.ndim != 3 or w1.shape[0] != E or w1.shape[1] != H or w1.shape[2] % 2:
        raise ShapeError(f"w1 must be [E={E}, H={H}, 2I], got {w1.shape}")
    I = w1.shape[2] // 2
    if w2.shape != (E, I, H):
        raise ShapeError(f"w2 must be {(E, I, H)}, got {w2.shape}")


def serial_forward(x_by_rank, w1: np.ndarray, w2: np.ndarray, plan: RoutingPlan) -> dict:
    """Five-operator forward chain in float64; returns outputs and saved activations."""
    x_by_rank = [np.asarray(x, dtype=np.float64) for x in x_by_rank]
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    _check_weights(w1, w2, plan, x_by_rank[0].shape[1])
    recv = dispatch_permute(x_by_rank, plan)
    hs, as_, ys = [], [], []
    for d in range(plan.ep_size):
        gl = plan.group_list(d)
        h = gmm(recv[d], gl, local_weights(w1, plan, d))
        a = swiglu(h)
        y = gmm(a, gl, local_weights(w2, plan, d))
        hs.append(h)
        as_.append(a)
        ys.append(y)
    out = combine_reduce(ys, plan)
    return {"out": out, "recv_x": recv, "h": hs, "a": as_, "y": ys}


def serial_backward(x_by_rank, w1: np.ndarray, w2: np.ndarray, plan: RoutingPlan,
                    dy_by_rank) -> dict:
    """Seven-operator backward chain in float64; returns dx, dw1, dw2 (global)."""
    fwd = serial_forward(x_by_rank, w1, w2, plan)
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    dy_by_rank = [np.asarray(d, dtype=np.float64) for d in dy_by_rank]
    dy_recv = dispatch_permute(dy_by_rank, plan, weighted=True)
    dw1 = np.zeros_like(w1)
    dw2 = np.zeros_like(w2)
    dx_recv = []
    L = plan.local_experts
    for d in range(plan.ep_size):
        gl = plan.group_list(d)
        da = gmm(dy_recv[d], gl, local_weights(w2, plan, d), transpose_w=True)
        dw2[d * L:(d + 1) * L] = gmm_weight_grad(fwd["a"][d], dy_recv[d], gl)
        dh = swiglu_grad(fwd["h"][d], da)
        dx_recv.append(gmm(dh, gl, local_weights(w1, plan, d), transpose_w=True))
        dw1[d * L:(d + 1) * L] = gmm_weight_grad(fwd["recv_x"][d], dh, gl)
    dx = combine_reduce(dx_recv, plan, weighted=False)
    return {"dx": dx, "dw1": dw1, "dw2": dw2, "forward": fwd}


def random_problem(plan: RoutingPlan, hidden: int, intermediate: int, seed: int = 0,
                   scale: float = 0.5) -> dict:
    """Deterministic inputs, weights and upstream gradient for a plan."""
    rng = np.random.default_rng(seed)
    E, P, T = plan.total_experts, plan.ep_size, plan.tokens
    return {
        "x": [rng.standard_normal((T, hidden)) * scale for _ in range(P)],
        "w1": rng.standard_normal((E, hidden, 2 * intermediate)) / np.sqrt(hidden),
        "w2": rng.standard_normal((E, intermediate, hidden)) / np.sqrt(intermediate),
        "dy": [rng.standard_normal((T, hidden)) for _ in range(P)],
    }


def max_relative_error(got, ref, floor: float = 1e-12) -> float:
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if got.shape != ref.shape:
        raise ShapeError(f"shape mismatch {got.shape} vs {ref.shape}")
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - ref) / (np.abs(ref) + floor)))


# ---------------------------------------------------------------------------
# buffer files: 8-byte little-endian header length, JSON header, raw data
# ---------------------------------------------------------------------------

def save_buffers(path, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float64)
        data = a.astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode()
    with open(Path(path), "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_buffers(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ShapeError(f"{path}: truncated buffer file")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + n])
    except ValueError as e:
        raise ShapeError(f"{path}: bad buffer header: {e}") from e
    base = 8 + n
    out = {}
    for ent in header["tensors"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        chunk = raw[base + ent["offset"]: base + ent["offset"] + ent["nbytes"]]
        if len(chunk) != ent["nbytes"]:
            raise ShapeError(f"{path}: tensor {ent['name']} truncated")
        out[ent["name"]] = np.frombuffer(chunk, dtype=dt).reshape(ent["shape"]).astype(
            np.dtype(ent["dtype"]))
    return out
