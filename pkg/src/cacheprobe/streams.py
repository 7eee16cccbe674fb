"""Stream detection and counterfactual trace edits.

A stream is an exact arithmetic progression of addresses touched in
program order, possibly interleaved with unrelated accesses.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import StreamRecord, Trace, TraceError

DEFAULT_MIN_LENGTH = 8
DEFAULT_MAX_GAP = 16


@dataclass(frozen=True)
class Stream:
    member_indices: tuple[int, ...]
    base: int
    stride: int

    @property
    def span(self) -> tuple[int, int]:
        return self.member_indices[0], self.member_indices[-1]

    def __len__(self) -> int:
        return len(self.member_indices)

    def record(self) -> StreamRecord:
        return StreamRecord(self.span[0], self.span[1], self.base, self.stride)

    def addresses(self) -> list[int]:
        return [self.base + k * self.stride for k in range(len(self))]


class _Candidate:
    __slots__ = ("members", "stride", "expected", "last")

    def __init__(self, members, stride, expected):
        self.members = members
        self.stride = stride
        self.expected = expected
        self.last = members[-1]


def detect_streams(trace: Trace, min_length: int = DEFAULT_MIN_LENGTH,
                   max_gap: int = DEFAULT_MAX_GAP) -> list[Stream]:
    """Find strided address progressions in one pass over the trace.

    Each access first tries to extend an open candidate that expects its
    address (the longest such candidate wins). If none does, it seeds a new
    two-element candidate with every unclaimed access among the previous
    ``max_gap + 1``. A candidate dies once more than ``max_gap`` accesses
    pass without it being extended.

    Overlaps are resolved longest-first; a candidate that loses members to a
    longer one keeps its longest run of unclaimed consecutive members.
    Streams are returned ordered by their first member index.
    """
    if min_length < 3:
        raise ValueError("min_length must be >= 3")
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    addresses = trace.addresses.tolist()
    open_by_addr: dict[int, list[_Candidate]] = {}
    finished: list[_Candidate] = []
    recent: list[int] = []  # unclaimed indices within the gap window
    live: list[_Candidate] = []

    for i, address in enumerate(addresses):
        # retire candidates that can no longer be extended
        if live and i - live[0].last - 1 > max_gap:
            still = []
            for cand in live:
                if i - cand.last - 1 > max_gap:
                    _drop(open_by_addr, cand)
                    if len(cand.members) >= min_length:
                        finished.append(cand)
                else:
                    still.append(cand)
            live = still
        recent = [j for j in recent if i - j - 1 <= max_gap]

        waiting = open_by_addr.get(address)
        if waiting:
            cand = max(waiting, key=lambda c: (len(c.members), -c.members[0]))
            _drop(open_by_addr, cand)
            cand.members.append(i)
            cand.last = i
            cand.expected = address + cand.stride
            open_by_addr.setdefault(cand.expected, []).append(cand)
            # keep ``live`` ordered by last extension
            live.remove(cand)
            live.append(cand)
            continue

        for j in recent:
            stride = address - addresses[j]
            if stride == 0:
                continue
            cand = _Candidate([j, i], stride, address + stride)
            open_by_addr.setdefault(cand.expected, []).append(cand)
            live.append(cand)
        recent.append(i)

    finished.extend(c for c in live if len(c.members) >= min_length)
    return _resolve(finished, addresses, min_length)


def _drop(index: dict[int, list[_Candidate]], cand: _Candidate) -> None:
    bucket = index[cand.expected]
    bucket.remove(cand)
    if not bucket:
        del index[cand.expected]


def _resolve(cands: list[_Candidate], addresses: list[int], min_length: int) -> list[Stream]:
    claimed: set[int] = set()
    streams = []
    for cand in sorted(cands, key=lambda c: (-len(c.members), c.members[0], c.stride)):
        best: list[int] = []
        run: list[int] = []
        for m in cand.members:
            if m in claimed:
                run = []
            else:
                run.append(m)
                if len(run) > len(best):
                    best = list(run)
        if len(best) < min_length:
            continue
        claimed.update(best)
        streams.append(Stream(tuple(best), addresses[best[0]], cand.stride))
    streams.sort(key=lambda s: (s.member_indices[0], s.stride))
    return streams


def _check_stream(trace: Trace, stream: Stream) -> None:
    idx = stream.member_indices
    if not idx or idx[0] < 0 or idx[-1] >= len(trace):
        raise TraceError(f"stream indices {stream.span} out of range for a trace of "
                         f"{len(trace)} accesses")
    if list(idx) != sorted(set(idx)):
        raise TraceError("stream member indices must be strictly increasing")


def _delete(trace: Trace, drop: Sequence[int]) -> tuple[Trace, dict[int, int]]:
    keep = np.ones(len(trace), dtype=bool)
    keep[list(drop)] = False
    if not keep.any():
        raise TraceError("edit would leave an empty trace")
    survivors = np.flatnonzero(keep).tolist()
    return trace.select(keep), {old: new for new, old in enumerate(survivors)}


def remove_stream(trace: Trace, stream: Stream) -> tuple[Trace, dict[int, int]]:
    """Delete every member access of ``stream``.

    Returns the edited trace and the old-index -> new-index map of surviving
    accesses.
    """
    _check_stream(trace, stream)
    return _delete(trace, stream.member_indices)


def keep_stream_suffix(trace: Trace, stream: Stream,
                       fraction: float) -> tuple[Trace, dict[int, int]]:
    """Delete the leading members of ``stream``, keeping the last
    ``ceil(fraction * len(stream))`` of them."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    _check_stream(trace, stream)
    n = len(stream)
    # round before flooring so that e.g. 0.3 * 10 keeps exactly 3
    n_drop = math.floor(round((1 - fraction) * n, 9))
    return _delete(trace, stream.member_indices[:n_drop])


def streams_from_records(trace: Trace, records: Sequence[StreamRecord]) -> list[Stream]:
    """Rebuild streams from ``.streams`` sidecar records by walking the trace."""
    streams = []
    addresses = trace.addresses
    for r in records:
        if r.end_index >= len(trace) or r.start_index < 0:
            raise TraceError(f"stream record {r} out of range")
        members, expected = [], r.base
        for i in range(r.start_index, r.end_index + 1):
            if addresses[i] == expected:
                members.append(i)
                expected += r.stride
        if not members or members[0] != r.start_index or members[-1] != r.end_index:
            raise TraceError(f"stream record {r} does not match the trace")
        streams.append(Stream(tuple(members), r.base, r.stride))
    return streams


def select_stream(streams: Sequence[Stream], stream_id: int | None = None,
                  base: int | None = None, stride: int | None = None) -> Stream:
    """Pick a stream by list position or by ``(base, stride)``."""
    if stream_id is not None:
        if not 0 <= stream_id < len(streams):
            raise TraceError(f"no stream with id {stream_id} ({len(streams)} detected)")
        return streams[stream_id]
    matches = [s for s in streams
               if (base is None or s.base == base) and (stride is None or s.stride == stride)]
    if len(matches) != 1:
        raise TraceError(f"{len(matches)} streams match base={base} stride={stride}")
    return matches[0]


def member_pcs(trace: Trace, stream: Stream) -> list[int]:
    """Distinct program counters that issued the stream's accesses."""
    return sorted(set(trace.pcs[list(stream.member_indices)].tolist()))


def write_index_map(path: str | os.PathLike, index_map: dict[int, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("old,new\n")
        for old, new in sorted(index_map.items()):
            f.write(f"{old},{new}\n")


def read_index_map(path: str | os.PathLike) -> dict[int, int]:
    with open(path, encoding="utf-8") as f:
        if f.readline().strip() != "old,new":
            raise TraceError(f"{path}: expected header 'old,new'")
        out = {}
        for row in f:
            old, new = row.strip().split(",")
            out[int(old)] = int(new)
    return out
