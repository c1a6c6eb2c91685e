"""Cost model of the simulated AIC/AIV device and its interconnect."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .graph import CUBE_KINDS, OperatorKind

# per-worker bandwidths; L2 reads are 4x faster than HBM reads
HBM_READ_US_PER_BYTE = 1.0 / 32e3
L2_READ_US_PER_BYTE = HBM_READ_US_PER_BYTE / 4


def _default_fixed() -> dict[str, float]:
    return {k.value: 0.5 for k in OperatorKind}


def _default_per_unit() -> dict[str, float]:
    # CUBE work unit: multiply-accumulates; VECTOR work unit: output elements
    return {k.value: (6.5e-6 if k in CUBE_KINDS else 2e-4) for k in OperatorKind}


@dataclass(frozen=True)
class CostModel:
    aic_workers: int = 25
    aiv_workers: int = 50
    l2_capacity_bytes: int = 192 * 2**20
    l2_read_time_per_byte: float = L2_READ_US_PER_BYTE
    hbm_read_time_per_byte: float = HBM_READ_US_PER_BYTE
    compute_fixed_us: dict = field(default_factory=_default_fixed)
    compute_per_unit_us: dict = field(default_factory=_default_per_unit)
    comm_latency_alpha: float = 2.0
    ingress_bytes_per_microsecond: float = 25e3
    signal_delay: float = 0.0
    dispatch_overhead_static: float = 0.1
    dispatch_overhead_dynamic: float = 2.36
    kernel_launch_overhead: float = 5.0

    def __post_init__(self):
        if self.aic_workers < 1 or self.aiv_workers < 1:
            raise ConfigError("worker counts must be positive")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.ingress_bytes_per_microsecond <= 0:
            raise ConfigError("ingress bandwidth must be positive")
        fixed = _default_fixed()
        fixed.update(self.compute_fixed_us)
        per = _default_per_unit()
        per.update(self.compute_per_unit_us)
        object.__setattr__(self, "compute_fixed_us", fixed)
        object.__setattr__(self, "compute_per_unit_us", per)

    def compute_time(self, kind: OperatorKind | str, work: float) -> float:
        k = OperatorKind(kind).value
        return self.compute_fixed_us[k] + self.compute_per_unit_us[k] * work

    def transfer_time(self, nbytes: int) -> float:
        return self.comm_latency_alpha + nbytes / self.ingress_bytes_per_microsecond

    def dispatch_overhead(self, dispatch: str) -> float:
        if dispatch == "static":
            return self.dispatch_overhead_static
        if dispatch == "dynamic":
            return self.dispatch_overhead_dynamic
        raise ConfigError(f"unknown dispatch mode {dispatch!r}")

    def with_(self, **kw) -> CostModel:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> CostModel:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown cost-model fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> CostModel:
        return cls.from_dict(json.loads(text))
