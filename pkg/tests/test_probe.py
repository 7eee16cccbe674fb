import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacheprobe import probe
from cacheprobe.cachesim import CacheConfig, policy_belady, simulate
from cacheprobe.model import CachingModel, ModelConfig, record_activations, train_imitation
from cacheprobe.probe import (ActivationRecord, compare_records, correlate_with_phases,
                              embedding_report, invert_alignment, jacobi_eigh, pca, pearson)
from cacheprobe.trace import Trace
from oracles import dense_pca

shapes = st.tuples(st.integers(2, 40), st.integers(1, 12))


def _assert_invariants(result, dims):
    comps = result.components
    gram = comps @ comps.T
    assert np.abs(gram - np.eye(len(comps))).max() <= 1e-6
    r = result.explained_variance_ratio
    assert (np.diff(r) <= 1e-15).all() and (r >= 0).all() and (r <= 1).all()
    assert r.sum() <= 1 + 1e-12
    assert comps.shape[1] == dims


def test_rank_one_line():
    x = np.arange(10.0)
    data = np.stack([x, 2 * x], axis=1) + [5.0, -3.0]
    result = pca(data, 2)
    assert np.allclose(result.explained_variance_ratio, [1.0, 0.0], atol=1e-9)
    assert np.allclose(result.components[0], np.array([1, 2]) / np.sqrt(5))
    assert np.allclose(result.mean, [9.5, 6.0])


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_full_rank_ratios_sum_to_one(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    k = min(shape)
    if shape[0] <= shape[1]:
        k = min(k, shape[0])
    result = pca(x, k)
    _assert_invariants(result, shape[1])
    if k == shape[1] and shape[0] > shape[1]:
        assert result.explained_variance_ratio.sum() == pytest.approx(1.0, abs=1e-9)


def test_matches_dense_oracle():
    x = np.random.default_rng(7).normal(size=(200, 10)) @ np.diag(np.linspace(3, 0.2, 10))
    result = pca(x, 10)
    comps, ratios, proj = dense_pca(x, 10)
    assert np.abs(result.components - comps).max() <= 1e-8
    assert np.abs(result.explained_variance_ratio - ratios).max() <= 1e-8
    assert np.abs(result.projections - proj).max() <= 1e-8


def test_sign_convention():
    x = np.random.default_rng(1).normal(size=(50, 6))
    for row in pca(x, 4).components:
        assert row[np.argmax(np.abs(row))] > 0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_jacobi_matches_lapack(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    a = a + a.T
    values, vectors = jacobi_eigh(a)
    ref = np.sort(np.linalg.eigvalsh(a))[::-1]
    assert np.allclose(values, ref, atol=1e-10 * max(1, np.abs(ref).max()))
    assert np.allclose(vectors.T @ vectors, np.eye(n), atol=1e-12)
    assert np.allclose(a @ vectors, vectors * values, atol=1e-9 * max(1, np.abs(ref).max()))


def test_jacobi_repeated_eigenvalues_and_extremes():
    values, vectors = jacobi_eigh(np.eye(5) * 3.0)
    assert np.allclose(values, 3.0) and np.allclose(vectors, np.eye(5))
    a = np.diag([1e200, 1.0, -1e-200])
    a[0, 1] = a[1, 0] = 1.0
    values, vectors = jacobi_eigh(a)
    assert np.isfinite(values).all() and np.isfinite(vectors).all()
    assert np.allclose(vectors.T @ vectors, np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_reconstruction_of_low_rank_data(rank, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, rank)) @ rng.normal(size=(rank, 8)) + rng.normal(size=8)
    result = pca(x, rank)
    centered = x - x.mean(axis=0)
    err = np.linalg.norm(result.reconstruct() - x) / max(np.linalg.norm(centered), 1e-300)
    assert err <= 1e-6


def test_zero_variance_input():
    result = pca(np.ones((5, 3)), 2)
    assert result.explained_variance_ratio.tolist() == [0.0, 0.0]
    assert np.allclose(result.components @ result.components.T, np.eye(2))


@pytest.mark.parametrize("shape, k", [((1, 3), 1), ((5, 3), 4), ((5, 3), 0)])
def test_pca_rejects(shape, k):
    with pytest.raises(ValueError):
        pca(np.zeros(shape), k)


def test_record_validation():
    with pytest.raises(ValueError):
        ActivationRecord(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        ActivationRecord(np.zeros((2, 2)), kind="logits")


def test_pearson_fixtures():
    ind = np.array([0, 0, 1, 1, 1, 0, 1], dtype=float)
    assert abs(pearson(ind, ind) - 1.0) <= 1e-12
    assert abs(pearson(-ind, ind) + 1.0) <= 1e-12
    assert pearson(np.full(7, 2.5), ind) is None
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.0, 3.0, 2.0, 5.0])
    # closed form: sum of cross products 5.5, squares 5 and 8.75
    assert abs(pearson(x, y) - 5.5 / np.sqrt(5 * 8.75)) <= 1e-12


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30),
       st.floats(0.01, 50), st.floats(-50, 50))
def test_correlation_affine_invariance(values, scale, shift):
    x = np.array(values)
    labels = (np.arange(len(x)) % 2)
    r = pearson(x, labels)
    if r is None or np.std(x) < 1e-6:
        return
    assert pearson(scale * x + shift, labels) == pytest.approx(r, abs=1e-9)
    assert pearson(-x, labels) == pytest.approx(-r, abs=1e-9)


def test_correlate_with_phases():
    labels = np.array([0, 0, 1, 1, 2, 2])
    proj = np.stack([(labels == 1).astype(float), -(labels == 2).astype(float),
                     np.ones(6)], axis=1)
    report = correlate_with_phases(proj, labels)
    assert report.r.shape == (3, 3)
    assert report.r[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert report.r[1, 2] == pytest.approx(-1.0, abs=1e-12)
    assert np.isnan(report.r[2]).all()
    assert report.strongest()[2] in (1.0, -1.0)
    assert (np.abs(report.r[~np.isnan(report.r)]) <= 1).all()
    with pytest.raises(ValueError):
        correlate_with_phases(proj, labels[:5])


def test_compare_fixtures():
    a = ActivationRecord(np.random.default_rng(0).normal(size=(20, 4)))
    assert compare_records(a, a).mean_abs_difference == 0.0
    b = ActivationRecord(a.matrix + 0.5)
    assert compare_records(a, b).mean_abs_difference == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        compare_records(a, b, {})
    with pytest.raises(ValueError):
        compare_records(a, ActivationRecord(np.zeros((20, 3))))


def test_compare_uses_alignment_and_skips_deleted_rows():
    a = ActivationRecord(np.arange(10.0)[:, None])
    b = ActivationRecord(np.array([[0.0], [2.0], [4.0], [100.0]]))
    cmp = compare_records(a, b, {0: 0, 2: 1, 4: 2})
    assert cmp.rows == 3 and cmp.mean_abs_difference == 0.0


@given(st.integers(0, 2**32 - 1))
def test_compare_symmetry_under_inverse_alignment(seed):
    rng = np.random.default_rng(seed)
    a = ActivationRecord(rng.normal(size=(12, 3)), "pca-projection")
    keep = np.flatnonzero(rng.random(12) < 0.7)
    if len(keep) == 0:
        return
    alignment = {int(old): new for new, old in enumerate(keep)}
    b = ActivationRecord(rng.normal(size=(len(keep), 3)), "pca-projection")
    ab = compare_records(a, b, alignment)
    ba = compare_records(b, a, invert_alignment(alignment))
    assert ab.mean_abs_difference == pytest.approx(ba.mean_abs_difference, abs=1e-12)


def test_compare_sign_aligns_projections():
    a = np.random.default_rng(3).normal(size=(30, 3))
    b = a * np.array([1, -1, 1])
    cmp = compare_records(ActivationRecord(a, "pca-projection"),
                          ActivationRecord(b, "pca-projection"))
    assert cmp.mean_abs_difference == 0.0 and cmp.flipped == [1]
    raw = compare_records(ActivationRecord(a), ActivationRecord(b))
    assert raw.mean_abs_difference > 0


def test_embedding_report_shape_and_conservation():
    emb = np.random.default_rng(0).normal(size=(4, 5))  # OOV row + 3 lines
    lines = np.array([7, 8, 9, 7, 7, 42])  # 42 is not in the vocabulary
    hits = np.array([0, 0, 0, 1, 1, 0], dtype=bool)
    result, rows = embedding_report(emb, [-1, 7, 8, 9], lines, hits, k=3)
    assert [r.line for r in rows] == [-1, 7, 8, 9]
    assert sum(r.accesses for r in rows) == len(lines)
    assert all(0 <= r.hit_rate <= 1 for r in rows)
    assert sum(r.hit_rate * r.accesses for r in rows) / len(lines) == pytest.approx(hits.mean())
    assert np.array_equal(rows[1].projections, result.projections[1])
    _, rows = embedding_report(emb, [-1, 7, 8, 9], lines[:5], hits[:5], k=3)
    assert len(rows) == 3


def _cacheability_trace(hot=32, rounds=20):
    """Hot lines always hit under the optimal policy; a larger cold pool never does."""
    order = np.random.default_rng(0).permutation(hot) * 3 + 1000
    cold = hot + hot // 2
    lines = []
    for t in range(2 * hot * rounds):
        k = t // 2
        lines.append(int(order[k % hot]) if t % 2 == 0 else 5000 + 7 * (k % cold))
    lines = np.array(lines)
    return Trace(0x400 + (lines % 5) * 4, lines * 64), CacheConfig.fully_associative(hot + 1)


def test_embedding_pcs_separate_planted_cacheability():
    trace, cache = _cacheability_trace()
    optimal = simulate(trace, cache, policy_belady(trace))
    config = ModelConfig(d_e=16, d_h=32, window=16, epochs=20, seed=0)
    model, _ = train_imitation(trace, cache, config)
    acts = record_activations(model, trace, cache)

    def probe_accuracy(embeddings):
        _, rows = embedding_report(embeddings, acts.line_ids, trace.lines(), optimal.outcomes)
        features = np.array([r.projections for r in rows])
        labels = np.array([r.hit_rate > 0.5 for r in rows])
        assert 0.3 < labels.mean() < 0.5  # both classes well represented
        return probe.linear_probe_accuracy(features, labels)

    trained = probe_accuracy(acts.address_embeddings)
    untrained = probe_accuracy(CachingModel.initialize(config, trace.pcs,
                                                       trace.lines()).params["addr_emb"])
    assert trained > 0.9
    assert untrained < trained - 0.2


def test_csv_exports(tmp_path):
    result = pca(np.random.default_rng(0).normal(size=(6, 3)), 2)
    probe.write_projections(tmp_path / "p.csv", result)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "component,timestep,value" and len(rows) == 13
    assert np.array_equal(probe.read_projections(tmp_path / "p.csv"), result.projections)
    report = correlate_with_phases(np.stack([np.ones(4), [0, 0, 1, 1]], 1), [0, 0, 1, 1])
    probe.write_correlations(tmp_path / "c.csv", report)
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "component,phase,r" and text[1] == "0,0,NA" and text[4] == "1,1,1"
    probe.write_explained_variance(tmp_path / "v.csv", result)
    assert (tmp_path / "v.csv").read_text().startswith("component,explained_variance_ratio\n0,")
