"""Phase finding from reuse-distance and delta-PC histograms.

A trace is cut into fixed-length slices, each described by two histograms
(forward reuse distance and signed pc delta). Adjacent slices are merged
while they are similar, and the surviving segments are grouped by
complete-linkage agglomerative clustering. Distance throughout is the L1
distance of the reuse histograms plus (weighted) the L1 distance of the
delta-PC histograms.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .trace import INFINITE, Trace, reuse_profile

DEFAULT_SLICE_LEN = 1000
DEFAULT_MERGE_THRESHOLD = 0.4
DEFAULT_GLOBAL_THRESHOLD = 0.4
MAX_REUSE_EXPONENT = 20


@dataclass(frozen=True)
class BinSpec:
    """Histogram binning shared by all slices of a trace.

    Reuse bins: ``[1], [2], [3,4], [5,8], ... (2**(e-1), 2**e]`` up to
    ``2**max_exponent`` (larger finite distances fall in the last of these),
    then one bin for INFINITE.

    Delta-PC bins: ``0``, then per sign ``1..8`` individually, ``9..64``,
    ``65..4096`` and ``>4096``.
    """

    max_exponent: int = MAX_REUSE_EXPONENT

    @property
    def n_reuse(self) -> int:
        return self.max_exponent + 2

    @property
    def n_dpc(self) -> int:
        return 1 + 2 * 11

    def reuse_bins(self, distances: np.ndarray) -> np.ndarray:
        distances = np.asarray(distances, dtype=np.int64)
        inf = distances == INFINITE
        finite = np.where(inf, 1, distances)
        # ceil(log2(d)) computed exactly with integer bit lengths
        exps = np.array([int(d - 1).bit_length() for d in finite.tolist()],
                        dtype=np.int64)
        exps = np.minimum(exps, self.max_exponent)
        return np.where(inf, self.max_exponent + 1, exps)

    def dpc_bins(self, deltas: np.ndarray) -> np.ndarray:
        deltas = np.asarray(deltas, dtype=np.int64)
        mag = np.abs(deltas)
        # magnitude class 0..10 for 1..8, 9..64, 65..4096, beyond
        cls = np.select([mag <= 8, mag <= 64, mag <= 4096],
                        [mag - 1, 8, 9], default=10)
        return np.where(deltas == 0, 0, np.where(deltas > 0, 1 + cls, 12 + cls))

    def labels(self) -> tuple[list[str], list[str]]:
        reuse = [f"<={2 ** e}" for e in range(self.max_exponent + 1)] + ["inf"]
        mags = [str(m) for m in range(1, 9)] + ["9-64", "65-4096", ">4096"]
        dpc = ["0"] + [f"+{m}" for m in mags] + [f"-{m}" for m in mags]
        return reuse, dpc


@dataclass
class SliceFeatures:
    """Histogram counts for one span ``[start, end)`` of the trace."""

    reuse_counts: np.ndarray
    dpc_counts: np.ndarray
    span: tuple[int, int]

    @property
    def reuse_hist(self) -> np.ndarray:
        return _normalized(self.reuse_counts)

    @property
    def dpc_hist(self) -> np.ndarray:
        return _normalized(self.dpc_counts)

    def __len__(self) -> int:
        return self.span[1] - self.span[0]

    def merged(self, other: "SliceFeatures") -> "SliceFeatures":
        # Summing counts equals the length-weighted mean of the histograms.
        return SliceFeatures(self.reuse_counts + other.reuse_counts,
                             self.dpc_counts + other.dpc_counts,
                             (min(self.span[0], other.span[0]),
                              max(self.span[1], other.span[1])))


def _normalized(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def feature_distance(a: SliceFeatures, b: SliceFeatures, dpc_weight: float = 1.0) -> float:
    return float(np.abs(a.reuse_hist - b.reuse_hist).sum()
                 + dpc_weight * np.abs(a.dpc_hist - b.dpc_hist).sum())


@dataclass
class PhaseLabeling:
    labels: np.ndarray
    num_phases: int = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.unique(self.labels)
        if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
            raise ValueError("phase ids must form a contiguous range 0..n-1")
        self.num_phases = len(ids)

    def __len__(self) -> int:
        return len(self.labels)

    def spans(self) -> list[tuple[int, int, int]]:
        """Maximal runs ``(start, end, phase)`` with ``end`` exclusive."""
        out = []
        start = 0
        labels = self.labels.tolist()
        for i in range(1, len(labels) + 1):
            if i == len(labels) or labels[i] != labels[start]:
                out.append((start, i, labels[start]))
                start = i
        return out


@dataclass
class PhaseFrequencyTable:
    counts: dict[tuple[int, int], int]

    def total(self) -> int:
        return sum(self.counts.values())


def slice_features(trace: Trace, profile: np.ndarray | None = None,
                   slice_len: int = DEFAULT_SLICE_LEN,
                   bin_spec: BinSpec | None = None) -> list[SliceFeatures]:
    """Cut ``trace`` into consecutive slices and histogram each one.

    A trailing partial slice shorter than ``slice_len / 2`` is folded into
    its predecessor. Delta-PC at index ``i`` is ``pc[i] - pc[i-1]`` taken
    across slice borders; index 0 has no delta.
    """
    if slice_len < 2:
        raise ValueError("slice_len must be >= 2")
    n = len(trace)
    if n < slice_len:
        raise ValueError(f"trace of {n} accesses is shorter than one slice ({slice_len})")
    bin_spec = bin_spec or BinSpec()
    if profile is None:
        profile = reuse_profile(trace)
    reuse_bin = bin_spec.reuse_bins(profile)
    dpc_bin = np.full(n, -1, dtype=np.int64)
    dpc_bin[1:] = bin_spec.dpc_bins(np.diff(trace.pcs))

    bounds = list(range(0, n, slice_len))
    if n - bounds[-1] < slice_len / 2 and len(bounds) > 1:
        bounds.pop()
    bounds.append(n)

    out = []
    for start, end in zip(bounds[:-1], bounds[1:]):
        r = np.bincount(reuse_bin[start:end], minlength=bin_spec.n_reuse)
        d = dpc_bin[start:end]
        d = np.bincount(d[d >= 0], minlength=bin_spec.n_dpc)
        out.append(SliceFeatures(r.astype(np.int64), d.astype(np.int64), (start, end)))
    return out


def merge_neighbors(features: list[SliceFeatures], threshold: float = DEFAULT_MERGE_THRESHOLD,
                    dpc_weight: float = 1.0) -> list[SliceFeatures]:
    """Greedily merge the closest adjacent pair while its distance < threshold."""
    if not features:
        raise ValueError("no slices to merge")
    if threshold <= 0:
        raise ValueError("merge threshold must be positive")
    segments = list(features)
    gaps = [feature_distance(a, b, dpc_weight) for a, b in zip(segments, segments[1:])]
    while gaps:
        k = int(np.argmin(gaps))
        if gaps[k] >= threshold:
            break
        segments[k:k + 2] = [segments[k].merged(segments[k + 1])]
        del gaps[k]
        if k > 0:
            gaps[k - 1] = feature_distance(segments[k - 1], segments[k], dpc_weight)
        if k < len(gaps):
            gaps[k] = feature_distance(segments[k], segments[k + 1], dpc_weight)
    return segments


def complete_linkage(dist: np.ndarray, threshold: float) -> np.ndarray:
    """Cluster ids from complete-linkage agglomeration of a distance matrix.

    Clusters are joined, closest first, while their complete-linkage distance
    (maximum pairwise member distance) is below ``threshold``.
    """
    n = len(dist)
    clusters = {i: [i] for i in range(n)}
    link = np.array(dist, dtype=np.float64, copy=True)
    np.fill_diagonal(link, np.inf)
    alive = np.ones(n, dtype=bool)
    while alive.sum() > 1:
        masked = np.where(alive[:, None] & alive[None, :], link, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        if masked[i, j] >= threshold:
            break
        i, j = min(i, j), max(i, j)
        clusters[i].extend(clusters.pop(j))
        alive[j] = False
        link[i, :] = np.maximum(link[i, :], link[j, :])
        link[:, i] = link[i, :]
        link[i, i] = np.inf
    assignment = np.empty(n, dtype=np.int64)
    for cid, members in clusters.items():
        assignment[members] = cid
    return assignment


def global_cluster(segments: list[SliceFeatures], threshold: float = DEFAULT_GLOBAL_THRESHOLD,
                   dpc_weight: float = 1.0) -> PhaseLabeling:
    """Group segments into phases; ids are assigned in order of first appearance."""
    n = len(segments)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = feature_distance(segments[i], segments[j], dpc_weight)
    raw = complete_linkage(dist, threshold)
    renumber: dict[int, int] = {}
    length = max(s.span[1] for s in segments)
    labels = np.full(length, -1, dtype=np.int64)
    for seg, cid in sorted(zip(segments, raw.tolist()), key=lambda p: p[0].span):
        phase = renumber.setdefault(cid, len(renumber))
        labels[seg.span[0]:seg.span[1]] = phase
    if (labels < 0).any():
        raise ValueError("segments do not cover the trace")
    return PhaseLabeling(labels)


def find_phases(trace: Trace, slice_len: int = DEFAULT_SLICE_LEN,
                merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
                global_threshold: float = DEFAULT_GLOBAL_THRESHOLD,
                dpc_weight: float = 1.0, bin_spec: BinSpec | None = None) -> PhaseLabeling:
    """Slice, merge neighbours, then cluster globally."""
    features = slice_features(trace, slice_len=slice_len, bin_spec=bin_spec)
    segments = merge_neighbors(features, merge_threshold, dpc_weight)
    return global_cluster(segments, global_threshold, dpc_weight)


def phase_frequency_table(trace: Trace, labeling: PhaseLabeling | np.ndarray) -> PhaseFrequencyTable:
    labels = np.asarray(getattr(labeling, "labels", labeling))
    if len(labels) != len(trace):
        raise ValueError(f"labeling has {len(labels)} entries, trace has {len(trace)}")
    counts = Counter(zip(labels.tolist(), trace.lines().tolist()))
    return PhaseFrequencyTable(dict(counts))


def label_agreement(predicted, truth) -> float:
    """Fraction of timesteps that agree under the best one-to-one relabeling.

    Exact (by enumeration) for up to 8 labels on the larger side; beyond that
    a greedy assignment gives a lower bound.
    """
    from itertools import permutations

    predicted = np.asarray(getattr(predicted, "labels", predicted))
    truth = np.asarray(getattr(truth, "labels", truth))
    if len(predicted) != len(truth):
        raise ValueError("labelings differ in length")
    p_ids, p = np.unique(predicted, return_inverse=True)
    t_ids, t = np.unique(truth, return_inverse=True)
    table = np.zeros((len(p_ids), len(t_ids)), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    if len(p_ids) < len(t_ids):
        table = table.T
    rows, cols = table.shape  # rows >= cols
    if rows > 8:
        best = _greedy_assignment(table)
    else:
        best = max(sum(table[r, c] for r, c in zip(perm, range(cols)))
                   for perm in permutations(range(rows), cols))
    return float(best) / len(truth)


def _greedy_assignment(table: np.ndarray) -> int:
    table = table.astype(np.float64).copy()
    total = 0
    for _ in range(min(table.shape)):
        r, c = np.unravel_index(np.argmax(table), table.shape)
        total += int(table[r, c])
        table[r, :] = -1
        table[:, c] = -1
    return total


def write_histograms(path: str | os.PathLike, features: list[SliceFeatures],
                     bin_spec: BinSpec | None = None) -> None:
    """CSV with one row per slice: span then normalized reuse/dpc bins."""
    bin_spec = bin_spec or BinSpec()
    reuse_labels, dpc_labels = bin_spec.labels()
    header = (["start", "end"] + [f"reuse[{x}]" for x in reuse_labels]
              + [f"dpc[{x}]" for x in dpc_labels])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for s in features:
            values = [f"{v:.6g}" for v in np.concatenate([s.reuse_hist, s.dpc_hist])]
            f.write(",".join([str(s.span[0]), str(s.span[1])] + values) + "\n")
