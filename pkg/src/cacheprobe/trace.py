"""Memory-access traces: data model, text format, and reuse distances.

A trace is an ordered stream of ``(pc, address)`` pairs. Addresses are stored
raw (byte granularity); cache-line alignment happens where it is needed via
:func:`line_of` / :meth:`Trace.lines`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

HEADER = "pc,address"
DEFAULT_LINE_SIZE = 64

# Sentinel for "never accessed again". Large enough that index + INFINITE
# comparisons keep working when callers compare next-use positions.
INFINITE = np.iinfo(np.int64).max

_MAX_VALUE = np.iinfo(np.int64).max


class TraceError(ValueError):
    """Raised for malformed trace files or invalid trace parameters."""


class MemoryAccess(NamedTuple):
    index: int
    pc: int
    address: int


def _check_line_size(line_size: int) -> None:
    if line_size < 1 or line_size & (line_size - 1):
        raise TraceError(f"line_size must be a power of two, got {line_size}")


def line_of(address: int, line_size: int = DEFAULT_LINE_SIZE) -> int:
    """Cache-line identifier of ``address``: ``floor(address / line_size)``."""
    _check_line_size(line_size)
    return address // line_size


@dataclass(frozen=True, eq=False)
class Trace:
    """Immutable sequence of memory accesses.

    ``pcs`` and ``addresses`` are read-only int64 arrays of equal length.
    """

    pcs: np.ndarray
    addresses: np.ndarray
    line_size: int = DEFAULT_LINE_SIZE

    def __post_init__(self):
        _check_line_size(self.line_size)
        pcs = np.array(self.pcs, dtype=np.int64)
        addresses = np.array(self.addresses, dtype=np.int64)
        if pcs.ndim != 1 or pcs.shape != addresses.shape:
            raise TraceError("pcs and addresses must be 1-D and equally long")
        if len(pcs) and (pcs.min() < 0 or addresses.min() < 0):
            raise TraceError("pcs and addresses must be non-negative")
        pcs.setflags(write=False)
        addresses.setflags(write=False)
        object.__setattr__(self, "pcs", pcs)
        object.__setattr__(self, "addresses", addresses)

    @classmethod
    def from_accesses(cls, accesses: Sequence[tuple[int, int]],
                      line_size: int = DEFAULT_LINE_SIZE) -> "Trace":
        pcs = [pc for pc, _ in accesses]
        addresses = [address for _, address in accesses]
        return cls(np.array(pcs, dtype=np.int64),
                   np.array(addresses, dtype=np.int64), line_size)

    @classmethod
    def from_lines(cls, lines: Sequence[int], line_size: int = DEFAULT_LINE_SIZE,
                   pc: int = 0) -> "Trace":
        """Trace touching the given line ids, all issued by one pc."""
        lines = np.asarray(lines, dtype=np.int64)
        return cls(np.full(len(lines), pc, dtype=np.int64), lines * line_size,
                   line_size)

    def __len__(self) -> int:
        return len(self.pcs)

    def __iter__(self) -> Iterator[MemoryAccess]:
        for i, (pc, address) in enumerate(zip(self.pcs.tolist(),
                                              self.addresses.tolist())):
            yield MemoryAccess(i, pc, address)

    def __getitem__(self, index: int) -> MemoryAccess:
        if index < 0:
            index += len(self)
        return MemoryAccess(index, int(self.pcs[index]),
                            int(self.addresses[index]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.line_size == other.line_size
                and np.array_equal(self.pcs, other.pcs)
                and np.array_equal(self.addresses, other.addresses))

    def __hash__(self):
        return hash((self.line_size, self.pcs.tobytes(), self.addresses.tobytes()))

    def lines(self) -> np.ndarray:
        """Line id of every access."""
        return self.addresses // self.line_size

    def select(self, keep: np.ndarray) -> "Trace":
        """Sub-trace of the accesses where the boolean mask ``keep`` is set."""
        return Trace(self.pcs[keep], self.addresses[keep], self.line_size)


def parse_trace(data: bytes | str, line_size: int = DEFAULT_LINE_SIZE) -> Trace:
    """Parse the canonical ``pc,address`` text format.

    Raises:
      TraceError: on a bad header, a malformed record (the message carries the
        1-based record number), an empty trace, or a bad ``line_size``.
    """
    _check_line_size(line_size)
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceError(f"trace is not valid UTF-8: {exc}") from None
    rows = data.splitlines()
    if not rows or rows[0].strip() != HEADER:
        raise TraceError(f"first line must be exactly {HEADER!r}")
    pcs, addresses = [], []
    for record, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        fields = row.split(",")
        if len(fields) != 2:
            raise TraceError(f"record {record}: expected 2 fields, got {len(fields)}")
        try:
            pc, address = (_parse_hex(f) for f in fields)
        except ValueError as exc:
            raise TraceError(f"record {record}: {exc}") from None
        pcs.append(pc)
        addresses.append(address)
    if not pcs:
        raise TraceError("empty trace")
    return Trace(np.array(pcs, dtype=np.int64), np.array(addresses, dtype=np.int64),
                 line_size)


def _parse_hex(field: str) -> int:
    if not field.startswith("0x") or len(field) == 2:
        raise ValueError(f"{field!r} is not a 0x-prefixed hex integer")
    value = int(field[2:], 16)
    if value > _MAX_VALUE:
        raise ValueError(f"{field!r} exceeds the 63-bit range")
    return value


def serialize_trace(trace: Trace) -> str:
    out = [HEADER]
    out.extend(f"{pc:#x},{address:#x}"
               for pc, address in zip(trace.pcs.tolist(), trace.addresses.tolist()))
    return "\n".join(out) + "\n"


def read_trace(path: str | os.PathLike, line_size: int = DEFAULT_LINE_SIZE) -> Trace:
    with open(path, "rb") as f:
        return parse_trace(f.read(), line_size)


def write_trace(path: str | os.PathLike, trace: Trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize_trace(trace))


def reuse_profile(trace: Trace) -> np.ndarray:
    """Forward reuse distance of every access, at cache-line granularity.

    ``distances[i]`` is the number of accesses until the line touched at ``i``
    is touched again, or :data:`INFINITE` if it never is.
    """
    if len(trace) == 0:
        raise TraceError("reuse_profile needs a non-empty trace")
    lines = trace.lines().tolist()
    distances = np.full(len(lines), INFINITE, dtype=np.int64)
    next_seen: dict[int, int] = {}
    for i in range(len(lines) - 1, -1, -1):
        line = lines[i]
        j = next_seen.get(line)
        if j is not None:
            distances[i] = j - i
        next_seen[line] = i
    return distances


def next_use(trace: Trace) -> np.ndarray:
    """Index of the next access to the same line, or INFINITE."""
    distances = reuse_profile(trace)
    finite = distances != INFINITE
    out = np.full(len(distances), INFINITE, dtype=np.int64)
    out[finite] = np.arange(len(distances))[finite] + distances[finite]
    return out


# Sidecar files --------------------------------------------------------------

def write_phases(path: str | os.PathLike, labels: Sequence[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(f"{int(x)}\n" for x in labels))


def read_phases(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        rows = [row.strip() for row in f]
    try:
        return np.array([int(r) for r in rows if r], dtype=np.int64)
    except ValueError as exc:
        raise TraceError(f"{path}: bad phase id: {exc}") from None


class StreamRecord(NamedTuple):
    start_index: int
    end_index: int
    base: int
    stride: int


def write_stream_records(path: str | os.PathLike,
                         records: Sequence[StreamRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(f"{r.start_index},{r.end_index},{r.base:#x},{r.stride}\n")


def read_stream_records(path: str | os.PathLike) -> list[StreamRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, row in enumerate(f, start=1):
            row = row.strip()
            if not row:
                continue
            try:
                start, end, base, stride = row.split(",")
                records.append(StreamRecord(int(start), int(end), int(base, 0),
                                            int(stride)))
            except ValueError:
                raise TraceError(f"{path}:{lineno}: malformed stream record") from None
    return records
