"""Byte-weighted LRU model of the shared L2 cache.

Regions are tensor boxes.  A read is served from L2 for the part of it that
overlaps resident regions of the same tensor and from HBM for the rest; the
missed region is then installed.  Writes install their region.  Regions larger
than the whole cache bypass it.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from collections import OrderedDict

Region = tuple  # (tensor_id, offsets, extents)


def _overlap(a: Region, b: Region) -> int:
    n = 1
    for ao, ae, bo, be in zip(a[1], a[2], b[1], b[2]):
        lo, hi = max(ao, bo), min(ao + ae, bo + be)
        if hi <= lo:
            return 0
        n *= hi - lo
    return n


def _span(r: Region) -> tuple[int, int]:
    # leading-dimension interval, used to index resident regions
    if not r[1]:
        return 0, 1
    return r[1][0], r[1][0] + r[2][0]


def _numel(r: Region) -> int:
    n = 1
    for e in r[2]:
        n *= e
    return n


class L2Cache:
    def __init__(self, capacity_bytes: int, l2_time_per_byte: float, hbm_time_per_byte: float,
                 elem_bytes: int = 4):
        self.capacity = capacity_bytes
        self.l2_t = l2_time_per_byte
        self.hbm_t = hbm_time_per_byte
        self.elem_bytes = elem_bytes
        self.lines: OrderedDict[Region, int] = OrderedDict()
        # per tensor: resident regions sorted by (leading offset, region)
        self.by_tensor: dict[int, list[tuple[int, Region]]] = {}
        self.max_lead: dict[int, int] = {}
        self.used = 0
        self.hit_bytes = 0
        self.access_bytes = 0

    @property
    def hit_rate(self) -> float:
        return self.hit_bytes / self.access_bytes if self.access_bytes else 0.0

    def _evict_until(self, need: int) -> None:
        while self.lines and self.used + need > self.capacity:
            region, nbytes = self.lines.popitem(last=False)
            self._unindex(region)
            self.used -= nbytes

    def _unindex(self, region: Region) -> None:
        lst = self.by_tensor[region[0]]
        del lst[bisect_left(lst, (_span(region)[0], region))]

    def _candidates(self, region: Region) -> list[Region]:
        lst = self.by_tensor.get(region[0])
        if not lst:
            return []
        lo, hi = _span(region)
        i = bisect_left(lst, (lo - self.max_lead[region[0]] + 1,))
        out = []
        while i < len(lst) and lst[i][0] < hi:
            out.append(lst[i][1])
            i += 1
        return out

    def _install(self, region: Region, nbytes: int) -> None:
        if nbytes > self.capacity or nbytes == 0:
            return
        for other in self._candidates(region):
            # drop resident regions the new one fully covers
            if _overlap(region, other) == _numel(other):
                self.used -= self.lines.pop(other)
                self._unindex(other)
        if region in self.lines:
            self.lines.move_to_end(region)
            return
        self._evict_until(nbytes)
        self.lines[region] = nbytes
        lo, hi = _span(region)
        insort(self.by_tensor.setdefault(region[0], []), (lo, region))
        self.max_lead[region[0]] = max(self.max_lead.get(region[0], 0), hi - lo)
        self.used += nbytes

    def access(self, region: Region, nbytes: int | None = None,
               is_write: bool = False) -> tuple[float, bool]:
        """Return (time contribution, full hit) for one region access."""
        if nbytes is None:
            nbytes = _numel(region) * self.elem_bytes
        if is_write:
            self._install(region, nbytes)
            return 0.0, False
        self.access_bytes += nbytes
        if nbytes > self.capacity:
            return nbytes * self.hbm_t, False
        total = _numel(region)
        covered = 0
        for other in self._candidates(region):
            ov = _overlap(region, other)
            if ov:
                covered += ov
                self.lines.move_to_end(other)
        covered = min(covered, total)
        hit = nbytes * covered // total if total else 0
        self.hit_bytes += hit
        miss = nbytes - hit
        if miss:
            self._install(region, nbytes)
        return hit * self.l2_t + miss * self.hbm_t, miss == 0

    def read(self, region: Region, nbytes: int | None = None) -> tuple[float, bool]:
        return self.access(region, nbytes, False)

    def write(self, region: Region, nbytes: int | None = None) -> None:
        self.access(region, nbytes, True)
