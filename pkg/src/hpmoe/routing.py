"""Top-k routing plans and the receive-buffer layout they induce.

On every destination rank the received rows are laid out expert-major: for
local expert ``j`` the rows from source rank 0 come first, then rank 1, and so
on, each in ascending source-token order.  Expert groups are therefore
contiguous and ``group_list`` is their running row count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import RoutingError
from .graph import ShapeConfig


@dataclass(frozen=True, eq=False)
class RoutingPlan:
    ep_size: int
    local_experts: int
    top_k: int
    tokens: int
    # routes[src_rank][token] -> ((expert_id, weight), ...)
    routes: tuple

    def __post_init__(self):
        routes = tuple(tuple(tuple((int(e), float(w)) for e, w in tok) for tok in rank)
                       for rank in self.routes)
        object.__setattr__(self, "routes", routes)
        self._check()

    def __eq__(self, other):
        return isinstance(other, RoutingPlan) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    @property
    def total_experts(self) -> int:
        return self.ep_size * self.local_experts

    def _check(self):
        if len(self.routes) != self.ep_size:
            raise RoutingError(f"plan has {len(self.routes)} ranks, expected {self.ep_size}")
        for r, rank in enumerate(self.routes):
            if len(rank) != self.tokens:
                raise RoutingError(f"rank {r} has {len(rank)} tokens, expected {self.tokens}")
            for t, tok in enumerate(rank):
                if len(tok) != self.top_k:
                    raise RoutingError(f"rank {r} token {t}: {len(tok)} experts, expected top_k={self.top_k}")
                ids = [e for e, _ in tok]
                if len(set(ids)) != len(ids):
                    raise RoutingError(f"rank {r} token {t}: duplicate experts {ids}")
                for e, w in tok:
                    if not 0 <= e < self.total_experts:
                        raise RoutingError(f"rank {r} token {t}: expert {e} out of range")
                    if w < 0:
                        raise RoutingError(f"rank {r} token {t}: negative weight {w}")

    def check_config(self, c: ShapeConfig) -> None:
        if (c.ep_size, c.local_experts, c.top_k, c.tokens) != (
                self.ep_size, self.local_experts, self.top_k, self.tokens):
            raise RoutingError("routing plan does not match the shape configuration")

    # -- derived layout ---------------------------------------------------

    def host_rank(self, expert: int) -> int:
        return expert // self.local_experts

    @cached_property
    def _tokens_by(self) -> dict:
        out: dict = {}
        for s, rank in enumerate(self.routes):
            for t, tok in enumerate(rank):
                for e, w in tok:
                    out.setdefault((s, e), ([], []))
                    out[(s, e)][0].append(t)
                    out[(s, e)][1].append(w)
        return {k: (np.array(v[0], dtype=np.int64), np.array(v[1])) for k, v in out.items()}

    def tokens_for(self, src: int, expert: int) -> np.ndarray:
        return self._tokens_by.get((src, expert), (np.zeros(0, np.int64), None))[0]

    def weights_for(self, src: int, expert: int) -> np.ndarray:
        return self._tokens_by.get((src, expert), (None, np.zeros(0)))[1]

    def count(self, src: int, expert: int) -> int:
        return len(self.tokens_for(src, expert))

    @cached_property
    def counts(self) -> np.ndarray:
        """counts[src, expert] = rows sent from ``src`` to ``expert``."""
        m = np.zeros((self.ep_size, self.total_experts), dtype=np.int64)
        for (s, e), (toks, _) in self._tokens_by.items():
            m[s, e] = len(toks)
        return m

    def group_counts(self, dst: int) -> list[int]:
        L = self.local_experts
        return [int(self.counts[:, dst * L + j].sum()) for j in range(L)]

    def group_list(self, dst: int) -> list[int]:
        return [int(v) for v in np.cumsum(self.group_counts(dst))]

    def group_bounds(self, dst: int) -> list[tuple[int, int]]:
        ends = self.group_list(dst)
        starts = [0] + ends[:-1]
        return list(zip(starts, ends))

    def recv_rows(self, dst: int) -> int:
        gl = self.group_list(dst)
        return gl[-1] if gl else 0

    def block_offset(self, dst: int, local_expert: int, src: int) -> int:
        """First receive row on ``dst`` of the block (local_expert, src)."""
        e = dst * self.local_experts + local_expert
        start = self.group_bounds(dst)[local_expert][0]
        return start + int(self.counts[:src, e].sum())

    def send_counts(self) -> np.ndarray:
        """send_counts[src, dst] = rows src sends to dst."""
        L = self.local_experts
        return self.counts.reshape(self.ep_size, self.ep_size, L).sum(axis=2)

    def combine_offsets(self, dst: int) -> list[int]:
        """Per-source row offsets of the blocks a host returns, expert-summed."""
        col = self.send_counts()[:, dst]
        return [int(v) for v in np.concatenate([[0], np.cumsum(col)[:-1]])]

    def combine_sizes(self, dst: int) -> list[int]:
        return [int(v) for v in self.send_counts()[:, dst]]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "ep_size": self.ep_size,
            "local_experts": self.local_experts,
            "top_k": self.top_k,
            "tokens": self.tokens,
            "routes": [[[[e, w] for e, w in tok] for tok in rank] for rank in self.routes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RoutingPlan:
        return cls(d["ep_size"], d["local_experts"], d["top_k"], d["tokens"], d["routes"])

    @classmethod
    def from_json(cls, text: str) -> RoutingPlan:
        return cls.from_dict(json.loads(text))


def balanced_plan(c: ShapeConfig) -> RoutingPlan:
    """Round-robin routing: global token g picks experts (g*k + i) mod E.

    Every expert receives the same number of rows whenever E divides
    ep_size * tokens * top_k.
    """
    c.validate()
    E, k, T = c.total_experts, c.top_k, c.tokens
    routes = []
    for s in range(c.ep_size):
        rank = []
        for t in range(T):
            g = s * T + t
            rank.append([((g * k + i) % E, 1.0 / k) for i in range(k)])
        routes.append(rank)
    return RoutingPlan(c.ep_size, c.local_experts, k, T, routes)


def natural_plan(c: ShapeConfig, seed: int = 0, skew: float = 1.0) -> RoutingPlan:
    """Seeded skewed routing standing in for sampled natural routing.

    Expert popularity follows a Zipf-like law with exponent ``skew`` over a
    seeded permutation of experts; weights are normalized uniform draws.
    """
    c.validate()
    rng = np.random.default_rng(seed)
    E, k, T = c.total_experts, c.top_k, c.tokens
    popularity = (np.arange(E) + 1.0) ** (-float(skew))
    probs = np.empty(E)
    probs[rng.permutation(E)] = popularity
    probs /= probs.sum()
    routes = []
    for _ in range(c.ep_size):
        rank = []
        for _ in range(T):
            experts = rng.choice(E, size=k, replace=False, p=probs)
            w = rng.random(k) + 0.1
            w /= w.sum()
            rank.append(list(zip(experts.tolist(), w.tolist())))
        routes.append(rank)
    return RoutingPlan(c.ep_size, c.local_experts, k, T, routes)
