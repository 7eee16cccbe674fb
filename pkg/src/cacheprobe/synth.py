"""Synthetic traces with planted phases and streams.

Each segment of a :class:`SyntheticSpec` draws accesses from a working set
(uniform-random or cyclic over ``ws_lines`` lines) and from zero or more
planted streams. Every ``stream_period``-th access of the segment is a stream
access (round-robin over the segment's unfinished streams); the rest come
from the working set. PCs walk a loop described by ``pc_deltas``; stream
accesses are issued by the stream's own PC.

Ground truth (phase id per access, stream membership) is returned alongside
the trace so downstream analyses can be scored.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .phases import PhaseLabeling
from .streams import Stream
from .trace import DEFAULT_LINE_SIZE, Trace


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class PlantedStream:
    base: int
    stride: int
    length: int
    pc: int = 0x9000


@dataclass(frozen=True)
class Segment:
    duration: int
    phase: int = 0
    ws_base: int = 0x100000
    ws_lines: int = 16
    ws_pattern: str = "cyclic"  # or "uniform"
    pc_base: int = 0x400000
    pc_deltas: tuple[int, ...] = (4,)
    streams: tuple[PlantedStream, ...] = ()
    stream_period: int = 1


@dataclass(frozen=True)
class SyntheticSpec:
    segments: tuple[Segment, ...]
    seed: int = 0
    line_size: int = DEFAULT_LINE_SIZE
    disjoint: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        segments = []
        for seg in data["segments"]:
            seg = dict(seg)
            seg["streams"] = tuple(PlantedStream(**s) for s in seg.get("streams", ()))
            if "pc_deltas" in seg:
                seg["pc_deltas"] = tuple(seg["pc_deltas"])
            segments.append(Segment(**seg))
        rest = {k: v for k, v in data.items() if k != "segments"}
        return cls(segments=tuple(segments), **rest)


def load_spec(path: str | os.PathLike) -> SyntheticSpec:
    with open(path, encoding="utf-8") as f:
        return SyntheticSpec.from_dict(json.load(f))


def save_spec(path: str | os.PathLike, spec: SyntheticSpec) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _validate(spec: SyntheticSpec) -> None:
    if not spec.segments:
        raise SpecError("spec has no segments")
    ranges = []
    for k, seg in enumerate(spec.segments):
        if seg.duration <= 0:
            raise SpecError(f"segment {k}: duration must be positive")
        if seg.ws_pattern not in ("cyclic", "uniform"):
            raise SpecError(f"segment {k}: unknown ws_pattern {seg.ws_pattern!r}")
        if seg.ws_lines < 0 or seg.stream_period < 1 or not seg.pc_deltas:
            raise SpecError(f"segment {k}: bad ws_lines/stream_period/pc_deltas")
        if seg.ws_lines == 0 and not seg.streams:
            raise SpecError(f"segment {k}: no working set and no streams")
        if seg.ws_lines:
            ranges.append(("ws", k, seg.ws_base, seg.ws_base + seg.ws_lines * spec.line_size))
        for s in seg.streams:
            if s.stride == 0 or s.length < 1:
                raise SpecError(f"segment {k}: stream stride must be non-zero, length >= 1")
            lo, hi = sorted((s.base, s.base + (s.length - 1) * s.stride))
            ranges.append(("stream", k, lo, hi + 1))
    if spec.disjoint:
        # working sets may be shared by segments (recurring phases); streams
        # must not overlap any working set or each other.
        for a in range(len(ranges)):
            for b in range(a + 1, len(ranges)):
                ka, sa, la, ha = ranges[a]
                kb, sb, lb, hb = ranges[b]
                if ka == "ws" and kb == "ws":
                    continue
                if la < hb and lb < ha:
                    raise SpecError(f"address ranges of segment {sa} ({ka}) and "
                                    f"segment {sb} ({kb}) overlap")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Trace, PhaseLabeling, list[Stream]]:
    """Build the trace described by ``spec`` plus its ground truth.

    Returns ``(trace, phases, streams)``; deterministic in ``spec``.
    Phase ids in the returned labeling are renumbered by first appearance.
    """
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    pcs: list[int] = []
    addresses: list[int] = []
    phases: list[int] = []
    streams: list[Stream] = []
    ls = spec.line_size

    for seg in spec.segments:
        n = seg.duration
        members: list[list[int]] = [[] for _ in seg.streams]
        emitted = [0] * len(seg.streams)
        cycle_pos = 0
        pc = seg.pc_base
        turn = 0
        uniform = (rng.integers(0, seg.ws_lines, size=n)
                   if seg.ws_pattern == "uniform" and seg.ws_lines else None)
        order = _cycle_order(seg)
        for t in range(n):
            active = [k for k, s in enumerate(seg.streams) if emitted[k] < s.length]
            use_stream = active and (t % seg.stream_period == 0 or seg.ws_lines == 0)
            if use_stream:
                k = active[turn % len(active)]
                turn += 1
                s = seg.streams[k]
                members[k].append(len(addresses))
                addresses.append(s.base + emitted[k] * s.stride)
                pcs.append(s.pc)
                emitted[k] += 1
            else:
                if seg.ws_lines == 0:
                    raise SpecError("segment ran out of stream accesses with no working set")
                if uniform is not None:
                    line = int(uniform[t])
                else:
                    line = order[cycle_pos % seg.ws_lines]
                    cycle_pos += 1
                addresses.append(seg.ws_base + line * ls)
                pcs.append(pc)
                pc += seg.pc_deltas[t % len(seg.pc_deltas)]
                if pc < 0:
                    raise SpecError("pc walked below zero")
            phases.append(seg.phase)
        for k, s in enumerate(seg.streams):
            if members[k]:
                streams.append(Stream(tuple(members[k]), s.base, s.stride))

    trace = Trace(np.array(pcs, dtype=np.int64), np.array(addresses, dtype=np.int64), ls)
    renumber: dict[int, int] = {}
    labels = [renumber.setdefault(p, len(renumber)) for p in phases]
    streams.sort(key=lambda s: (s.member_indices[0], s.stride))
    return trace, PhaseLabeling(np.array(labels)), streams


def _cycle_order(seg: Segment) -> list[int]:
    """Fixed visiting order of a cyclic working set.

    A shuffled order keeps each pass from being an arithmetic progression
    (which stream detection would rightly report); it depends only on the
    working set so recurring segments repeat the same loop.
    """
    if not seg.ws_lines:
        return []
    rng = np.random.default_rng([seg.ws_base, seg.ws_lines])
    return rng.permutation(seg.ws_lines).tolist()


# Stock specs ----------------------------------------------------------------

def cyclic_spec(ways: int = 8, length: int = 5000, seed: int = 0,
                line_size: int = DEFAULT_LINE_SIZE) -> SyntheticSpec:
    """Loop over ``ways + 1`` lines: pathological for an LRU cache of ``ways``."""
    return SyntheticSpec((Segment(duration=length, ws_lines=ways + 1,
                                  ws_pattern="cyclic"),), seed, line_size)


# A few regimes with clearly different reuse and delta-PC profiles.
# Working sets stay small: forward reuse distances make the last ``ws_lines``
# accesses of every segment look different from the segment body.
REGIMES = (
    dict(ws_lines=8, ws_pattern="cyclic", pc_deltas=(4,)),
    dict(ws_lines=4, ws_pattern="uniform", pc_deltas=(1, 1, -2)),
    dict(ws_lines=16, ws_pattern="cyclic", pc_deltas=(8, 8, 8, 200, -224)),
    dict(ws_lines=2, ws_pattern="uniform", pc_deltas=(-4, 6000, -5996)),
    dict(ws_lines=4, ws_pattern="cyclic", pc_deltas=(2, 30, -32)),
)


def regime_segment(regime: int, duration: int, phase: int | None = None,
                   streams: tuple[PlantedStream, ...] = (), stream_period: int = 1) -> Segment:
    r = REGIMES[regime]
    return Segment(duration=duration, phase=regime if phase is None else phase,
                   ws_base=0x100000 * (regime + 1), pc_base=0x400000 + 0x10000 * regime,
                   streams=streams, stream_period=stream_period, **r)


def regime_spec(sequence, durations, seed: int = 0,
                line_size: int = DEFAULT_LINE_SIZE) -> SyntheticSpec:
    """Segments drawn from :data:`REGIMES` in the given order."""
    return SyntheticSpec(tuple(regime_segment(r, d) for r, d in zip(sequence, durations)),
                         seed, line_size)


def random_regime_spec(seed: int, min_regimes: int = 2, max_regimes: int = 4,
                       segments: tuple[int, int] = (3, 6),
                       duration: tuple[int, int] = (1500, 3000)) -> SyntheticSpec:
    """Random sequence over 2-4 regimes where every chosen regime recurs or
    appears at least once, with random segment lengths."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(min_regimes, max_regimes + 1))
    chosen = rng.choice(len(REGIMES), size=k, replace=False).tolist()
    n_seg = max(k, int(rng.integers(segments[0], segments[1] + 1)))
    order = list(chosen)
    while len(order) < n_seg:
        order.append(int(rng.choice([r for r in chosen if r != order[-1]])))
    # shuffle while keeping neighbours distinct
    for _ in range(100):
        perm = rng.permutation(order).tolist()
        if all(a != b for a, b in zip(perm, perm[1:])):
            order = perm
            break
    durations = rng.integers(duration[0], duration[1] + 1, size=len(order)).tolist()
    return regime_spec(order, durations, seed=seed)


def _streamed_segment(duration, streams, stream_period):
    # Uniform over 64 lines: too sparse for chance progressions within the
    # default stream gap window.
    return Segment(duration=duration, phase=1, ws_base=0x300000, ws_lines=64,
                   ws_pattern="uniform", pc_base=0x420000,
                   pc_deltas=(8, 8, 8, 200, -224), streams=streams,
                   stream_period=stream_period)


def default_spec(seed: int = 0) -> SyntheticSpec:
    """Two alternating phases; the second carries one planted stream per
    occurrence. Small enough for the whole CLI recipe to run in seconds."""
    stream_a = PlantedStream(base=0x2000000, stride=64, length=500, pc=0x9000)
    stream_b = PlantedStream(base=0x3000000, stride=64, length=500, pc=0x9100)
    segs = (
        regime_segment(0, 1500, phase=0),
        _streamed_segment(1500, (stream_a,), 3),
        regime_segment(0, 1500, phase=0),
        _streamed_segment(1500, (stream_b,), 3),
    )
    return SyntheticSpec(segs, seed)


def milc_like_spec(seed: int = 0) -> SyntheticSpec:
    """A phase with one long and two short interleaved streams, bracketed by
    a stream-free phase."""
    long_stream = PlantedStream(base=0x4000000, stride=64, length=700, pc=0x9000)
    short_a = PlantedStream(base=0x5000000, stride=64, length=150, pc=0x9200)
    short_b = PlantedStream(base=0x5100000, stride=-64, length=150, pc=0x9300)
    segs = (
        regime_segment(0, 1200, phase=0),
        _streamed_segment(3000, (long_stream, short_a, short_b), 3),
        regime_segment(0, 1200, phase=0),
    )
    return SyntheticSpec(segs, seed)


STOCK_SPECS = {
    "default": default_spec,
    "milc": milc_like_spec,
    "cyclic": lambda seed=0: cyclic_spec(seed=seed),
}
