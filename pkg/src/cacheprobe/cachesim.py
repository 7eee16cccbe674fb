"""Set-associative cache simulator with pluggable eviction policies."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .trace import INFINITE, Trace, next_use


class ContractViolation(RuntimeError):
    """A policy broke the simulator contract (e.g. named a non-resident line)."""


@dataclass(frozen=True)
class CacheConfig:
    total_lines: int = 1024
    associativity: int = 16
    line_size: int = 64

    def __post_init__(self):
        if self.total_lines < 1 or self.associativity < 1:
            raise ValueError("total_lines and associativity must be positive")
        if self.total_lines % self.associativity:
            raise ValueError("total_lines must be divisible by associativity")
        sets = self.num_sets
        if sets & (sets - 1):
            raise ValueError(f"number of sets must be a power of two, got {sets}")
        if self.line_size < 1 or self.line_size & (self.line_size - 1):
            raise ValueError("line_size must be a power of two")

    @property
    def num_sets(self) -> int:
        return self.total_lines // self.associativity

    @classmethod
    def fully_associative(cls, capacity: int, line_size: int = 64) -> "CacheConfig":
        return cls(capacity, capacity, line_size)


class Eviction(NamedTuple):
    index: int
    line: int
    candidates: tuple[int, ...]


@dataclass
class SimResult:
    outcomes: np.ndarray  # bool per access
    evictions: list[Eviction]
    policy: str
    config: CacheConfig

    @property
    def hits(self) -> int:
        return int(self.outcomes.sum())

    @property
    def misses(self) -> int:
        return len(self.outcomes) - self.hits

    @property
    def hit_rate(self) -> float:
        return self.hits / len(self.outcomes) if len(self.outcomes) else 0.0

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "config": asdict(self.config),
            "accesses": len(self.outcomes),
            "hits": self.hits,
            "evictions": len(self.evictions),
            "hit_rate": self.hit_rate,
        }


class EvictionPolicy:
    """Base class for replacement policies.

    The simulator calls :meth:`reset` once per run, :meth:`on_access` after
    every access (hit or fill), and :meth:`victim` only when a miss lands in a
    full set. ``victim`` must return one of ``candidates``.
    """

    name = "policy"

    def reset(self, trace: Trace, config: CacheConfig) -> None:
        pass

    def on_access(self, index: int, line: int, hit: bool) -> None:
        pass

    def victim(self, index: int, candidates: list[int]) -> int:
        raise NotImplementedError


class LRUPolicy(EvictionPolicy):
    name = "lru"

    def reset(self, trace, config):
        self._last = {}

    def on_access(self, index, line, hit):
        self._last[line] = index

    def victim(self, index, candidates):
        return min(candidates, key=lambda line: self._last[line])


class BeladyPolicy(EvictionPolicy):
    """Offline optimum: evict the line whose next use is farthest away.

    Lines that are never used again all tie at INFINITE; the lowest line id
    among them is evicted.
    """

    name = "belady"

    def __init__(self, trace: Trace):
        self._trace = trace
        self._next_use = next_use(trace)

    def reset(self, trace, config):
        if trace is not self._trace and trace != self._trace:
            raise ValueError("Belady policy was built for a different trace")
        self._pending = {}

    def on_access(self, index, line, hit):
        self._pending[line] = int(self._next_use[index])

    def victim(self, index, candidates):
        return max(candidates, key=lambda line: (self._pending[line], -line))

    def next_use_of(self, line: int) -> int:
        return self._pending.get(line, INFINITE)


class PhaseFrequencyPolicy(EvictionPolicy):
    """Evicts the resident line accessed least often in the current phase."""

    name = "phase"

    def __init__(self, labels, table: dict[tuple[int, int], int]):
        self._labels = np.asarray(labels)
        self._table = table

    def reset(self, trace, config):
        if len(self._labels) != len(trace):
            raise ValueError(f"phase labeling covers {len(self._labels)} accesses, "
                             f"trace has {len(trace)}")

    def victim(self, index, candidates):
        phase = int(self._labels[index])
        return min(candidates, key=lambda line: (self._table.get((phase, line), 0), line))


def policy_lru() -> LRUPolicy:
    return LRUPolicy()


def policy_belady(trace: Trace) -> BeladyPolicy:
    return BeladyPolicy(trace)


def policy_phase_freq(labeling, table) -> PhaseFrequencyPolicy:
    """Lookup-table baseline; ``labeling`` is a PhaseLabeling or label array,
    ``table`` a PhaseFrequencyTable or plain ``{(phase, line): count}``."""
    labels = getattr(labeling, "labels", labeling)
    counts = getattr(table, "counts", table)
    return PhaseFrequencyPolicy(labels, counts)


def simulate(trace: Trace, config: CacheConfig, policy: EvictionPolicy) -> SimResult:
    if trace.line_size != config.line_size:
        raise ValueError(f"trace line_size {trace.line_size} != cache line_size "
                         f"{config.line_size}")
    num_sets, ways = config.num_sets, config.associativity
    sets: list[set[int]] = [set() for _ in range(num_sets)]
    outcomes = np.zeros(len(trace), dtype=bool)
    evictions: list[Eviction] = []
    policy.reset(trace, config)

    for i, line in enumerate(trace.lines().tolist()):
        resident = sets[line & (num_sets - 1)]
        if line in resident:
            outcomes[i] = True
        else:
            if len(resident) >= ways:
                candidates = sorted(resident)
                victim = policy.victim(i, candidates)
                if victim not in resident:
                    raise ContractViolation(
                        f"{policy.name} evicted non-resident line {victim!r} at index {i}")
                resident.remove(victim)
                evictions.append(Eviction(i, victim, tuple(candidates)))
            resident.add(line)
        policy.on_access(i, line, bool(outcomes[i]))
    return SimResult(outcomes, evictions, policy.name, config)


def rolling_hit_rate(result: SimResult | np.ndarray, window: int) -> np.ndarray:
    """Trailing mean of the hit flags over at most ``window`` accesses."""
    if window < 1:
        raise ValueError("window must be >= 1")
    flags = np.asarray(getattr(result, "outcomes", result), dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(flags)])
    idx = np.arange(len(flags))
    lo = np.maximum(0, idx - window + 1)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def write_result(prefix: str | os.PathLike, trace: Trace, result: SimResult) -> None:
    """Write ``<prefix>.csv`` (per access) and ``<prefix>.json`` (summary)."""
    prefix = os.fspath(prefix)
    with open(prefix + ".csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("index,pc,address,hit\n")
        for i, (pc, address, hit) in enumerate(zip(trace.pcs.tolist(),
                                                  trace.addresses.tolist(),
                                                  result.outcomes.tolist())):
            f.write(f"{i},{pc:#x},{address:#x},{int(hit)}\n")
    with open(prefix + ".json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_result_csv(path: str | os.PathLike):
    """Load a per-access result CSV as ``(pcs, addresses, hits)`` arrays."""
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "index,pc,address,hit":
            raise ValueError(f"{path}: unexpected header {header!r}")
        pcs, addresses, hits = [], [], []
        for row in f:
            _, pc, address, hit = row.strip().split(",")
            pcs.append(int(pc, 16))
            addresses.append(int(address, 16))
            hits.append(hit == "1")
    return (np.array(pcs, dtype=np.int64), np.array(addresses, dtype=np.int64),
            np.array(hits, dtype=bool))
