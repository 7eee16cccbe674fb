"""PCA and correlation probes over recorded model internals."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

ACTIVATION_KINDS = ("hidden-state", "address-embedding", "attention-weights", "pca-projection")


@dataclass
class ActivationRecord:
    matrix: np.ndarray
    kind: str = "hidden-state"
    alignment: dict[int, int] | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("activation matrix must be 2-D")
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if not np.isfinite(self.matrix).all():
            raise ValueError("activation matrix has non-finite entries")


@dataclass
class PCAResult:
    components: np.ndarray                # (k, dims), orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,), descending
    projections: np.ndarray               # (rows, k)
    mean: np.ndarray                      # (dims,)
    eigenvalues: np.ndarray               # (k,), covariance eigenvalues

    def reconstruct(self) -> np.ndarray:
        return self.projections @ self.components + self.mean

    def as_record(self) -> ActivationRecord:
        return ActivationRecord(self.projections, "pca-projection")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: every index pair exactly once, n/2 disjoint pairs per round."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15,
                max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by Jacobi rotations.

    Each sweep visits every off-diagonal pair once in round-robin order, so
    the rotations within a round act on disjoint index pairs and are applied
    together as one orthogonal matrix. Returns ``(eigenvalues, eigenvectors)``
    sorted by descending eigenvalue; eigenvectors are columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n > 1 and scale > 0:
        rounds = _round_robin(n)
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * scale:
                break
            for p, q in rounds:
                apq = a[p, q]
                live = np.abs(apq) > 1e-300 * scale
                if not live.any():
                    continue
                p, q, apq = p[live], q[live], apq[live]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                big = np.abs(theta) > 1e150
                safe = np.where(big, 0.0, theta)
                t = np.where(big, 0.5 / np.where(big, theta, 1.0),
                             np.sign(safe + (safe == 0)) / (np.abs(safe) + np.sqrt(safe * safe + 1.0)))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a = 0.5 * (a + a.T)
                v = v @ rot
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every component is positive
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca(record: ActivationRecord | np.ndarray, k: int) -> PCAResult:
    """Top-``k`` principal components of the record's rows."""
    x = getattr(record, "matrix", record)
    x = np.asarray(x, dtype=np.float64)
    rows, dims = x.shape
    if rows < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= k <= min(rows, dims):
        raise ValueError(f"k must be in [1, {min(rows, dims)}], got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (rows - 1)
    values, vectors = jacobi_eigh(cov)
    values = np.maximum(values, 0.0)
    total = values.sum()
    ratios = values / total if total > 0 else np.zeros_like(values)
    components = _fix_signs(vectors[:, :k].T)
    return PCAResult(components, ratios[:k], centered @ components.T, mean, values[:k])


@dataclass
class CorrelationReport:
    r: np.ndarray  # (k, num_phases); NaN where undefined

    def rows(self):
        for c in range(self.r.shape[0]):
            for phase in range(self.r.shape[1]):
                value = self.r[c, phase]
                yield c, phase, None if np.isnan(value) else float(value)

    def strongest(self) -> tuple[int, int, float] | None:
        if np.isnan(self.r).all():
            return None
        c, phase = np.unravel_index(np.nanargmax(np.abs(self.r)), self.r.shape)
        return int(c), int(phase), float(self.r[c, phase])


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation, or None when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def correlate_with_phases(result: PCAResult | np.ndarray, labeling) -> CorrelationReport:
    """Pearson r between each projection series and each phase indicator."""
    proj = getattr(result, "projections", result)
    proj = np.asarray(proj, dtype=np.float64)
    if proj.ndim == 1:
        proj = proj[:, None]
    labels = np.asarray(getattr(labeling, "labels", labeling))
    if len(labels) != len(proj):
        raise ValueError(f"{len(proj)} projection rows vs {len(labels)} labels")
    n_phases = int(labels.max()) + 1 if len(labels) else 0
    r = np.full((proj.shape[1], n_phases), np.nan)
    for phase in range(n_phases):
        indicator = (labels == phase).astype(np.float64)
        for c in range(proj.shape[1]):
            value = pearson(proj[:, c], indicator)
            if value is not None:
                r[c, phase] = value
    return CorrelationReport(r)


@dataclass
class Comparison:
    mean_abs_difference: float
    per_component: np.ndarray
    rows: int
    flipped: list[int] = field(default_factory=list)


def compare_records(a: ActivationRecord, b: ActivationRecord,
                    alignment: dict[int, int] | None = None) -> Comparison:
    """Mean absolute difference between aligned rows of two records.

    ``alignment`` maps row indices of ``a`` to rows of ``b``; rows of ``a``
    without an entry are skipped. ``None`` means identity (equal row counts).
    For PCA projections each column of ``b`` is flipped when its aligned dot
    product with ``a``'s column is negative, since PC signs are arbitrary.
    """
    ma, mb = a.matrix, b.matrix
    if ma.shape[1] != mb.shape[1]:
        raise ValueError(f"records differ in width: {ma.shape[1]} vs {mb.shape[1]}")
    if alignment is None:
        if len(ma) != len(mb):
            raise ValueError("records differ in length and no alignment was given")
        rows_a = rows_b = np.arange(len(ma))
    else:
        pairs = sorted(alignment.items())
        if not pairs:
            raise ValueError("empty alignment")
        rows_a = np.array([p[0] for p in pairs])
        rows_b = np.array([p[1] for p in pairs])
    xa = ma[rows_a]
    xb = mb[rows_b].copy()
    flipped = []
    if a.kind == "pca-projection" and b.kind == "pca-projection":
        for c in range(xb.shape[1]):
            if float(xa[:, c] @ xb[:, c]) < 0:
                xb[:, c] = -xb[:, c]
                flipped.append(c)
    diff = np.abs(xa - xb)
    return Comparison(float(diff.mean()), diff.mean(axis=0), len(rows_a), flipped)


def invert_alignment(alignment: dict[int, int]) -> dict[int, int]:
    return {new: old for old, new in alignment.items()}


@dataclass
class EmbeddingRow:
    line: int          # -1 for the out-of-vocabulary row
    accesses: int
    hits: int
    projections: np.ndarray

    @property
    def hit_rate(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0


def embedding_report(embeddings: np.ndarray, row_lines: list[int], trace_lines: np.ndarray,
                     outcomes: np.ndarray, k: int = 3) -> tuple[PCAResult, list[EmbeddingRow]]:
    """Join a PCA of the address embeddings with per-line hit statistics.

    ``row_lines[r]`` is the line id of embedding row ``r`` (``-1`` for OOV).
    Only lines touched by the trace get a row; lines missing from the
    vocabulary are pooled under the OOV row.
    """
    k = min(k, embeddings.shape[0], embeddings.shape[1])
    result = pca(ActivationRecord(embeddings, "address-embedding"), k)
    row_of = {line: r for r, line in enumerate(row_lines) if line >= 0}
    oov_row = row_lines.index(-1) if -1 in row_lines else None
    stats: dict[int, list[int]] = {}
    for line, hit in zip(np.asarray(trace_lines).tolist(), np.asarray(outcomes).tolist()):
        key = line if line in row_of else -1
        entry = stats.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += int(hit)
    table = []
    for line in sorted(stats):
        r = row_of.get(line, oov_row)
        proj = result.projections[r] if r is not None else np.zeros(k)
        table.append(EmbeddingRow(line, stats[line][0], stats[line][1], proj))
    return result, table


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """Training accuracy of a least-squares linear classifier on 0/1 labels."""
    x = np.hstack([np.asarray(features, dtype=np.float64), np.ones((len(features), 1))])
    y = np.where(np.asarray(labels, dtype=bool), 1.0, -1.0)
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return float(((x @ w > 0) == (y > 0)).mean())


# CSV export ---------------------------------------------------------------

def write_projections(path: str | os.PathLike, result: PCAResult) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("component,timestep,value\n")
        for c in range(result.projections.shape[1]):
            for t, value in enumerate(result.projections[:, c].tolist()):
                f.write(f"{c},{t},{value:.17g}\n")


def read_projections(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "component,timestep,value":
            raise ValueError(f"{path}: unexpected header {header!r}")
        entries = [row.strip().split(",") for row in f if row.strip()]
    k = max(int(c) for c, _, _ in entries) + 1
    n = max(int(t) for _, t, _ in entries) + 1
    out = np.zeros((n, k))
    for c, t, v in entries:
        out[int(t), int(c)] = float(v)
    return out


def write_correlations(path: str | os.PathLike, report: CorrelationReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("component,phase,r\n")
        for c, phase, r in report.rows():
            f.write(f"{c},{phase},{'NA' if r is None else f'{r:.17g}'}\n")


def write_explained_variance(path: str | os.PathLike, result: PCAResult) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("component,explained_variance_ratio\n")
        for c, ratio in enumerate(result.explained_variance_ratio.tolist()):
            f.write(f"{c},{ratio:.17g}\n")
