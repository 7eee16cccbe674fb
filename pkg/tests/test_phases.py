import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacheprobe import phases, synth
from cacheprobe.phases import (BinSpec, PhaseLabeling, SliceFeatures, complete_linkage,
                               feature_distance, global_cluster, label_agreement,
                               merge_neighbors, phase_frequency_table, slice_features)
from cacheprobe.trace import INFINITE, Trace
from oracles import (agreement_by_enumeration, best_permutation_agreement, same_partition,
                     scipy_complete_linkage)


def _features(reuse, dpc, span):
    return SliceFeatures(np.asarray(reuse, dtype=np.int64), np.asarray(dpc, dtype=np.int64),
                         span)


random_features = st.lists(
    st.tuples(st.lists(st.integers(0, 5), min_size=3, max_size=3),
              st.lists(st.integers(0, 5), min_size=2, max_size=2)),
    min_size=1, max_size=12,
).map(lambda rows: [_features(r, d, (4 * i, 4 * i + 4)) for i, (r, d) in enumerate(rows)])


def test_constant_trace_histograms():
    trace = Trace.from_lines([9] * 8, pc=0x40)
    feats = slice_features(trace, slice_len=4)
    assert len(feats) == 2
    for f in feats:
        assert f.dpc_hist[0] == 1.0
    assert feats[0].reuse_hist[0] == 1.0
    inf_bin = BinSpec().n_reuse - 1
    assert feats[1].reuse_counts[0] == 3 and feats[1].reuse_counts[inf_bin] == 1


def test_histograms_normalized_and_aligned(default_run):
    feats = slice_features(default_run[0], slice_len=100)
    for f in feats:
        assert f.reuse_hist.sum() == pytest.approx(1.0, abs=1e-9)
        assert f.dpc_hist.sum() == pytest.approx(1.0, abs=1e-9)
        assert f.reuse_hist.shape == feats[0].reuse_hist.shape
        assert f.dpc_hist.shape == feats[0].dpc_hist.shape


def test_identical_slices_have_zero_distance():
    trace = Trace.from_lines([1, 2, 3, 4] * 6)
    feats = slice_features(trace, slice_len=4)
    assert feature_distance(feats[1], feats[2]) == 0.0


def test_slices_cover_trace_and_fold_short_tail():
    trace = Trace.from_lines(list(range(1040)))
    spans = [f.span for f in slice_features(trace, slice_len=100)]
    assert spans[-1] == (900, 1040) and len(spans) == 10
    spans = [f.span for f in slice_features(Trace.from_lines(list(range(1050))), slice_len=100)]
    assert spans[-1] == (1000, 1050) and len(spans) == 11


def test_slice_features_errors():
    with pytest.raises(ValueError):
        slice_features(Trace.from_lines([1, 2, 3]), slice_len=10)
    with pytest.raises(ValueError):
        slice_features(Trace.from_lines([1, 2, 3]), slice_len=1)


def test_dpc_crosses_slice_borders():
    pcs = [0, 4, 8, 12]
    trace = Trace(np.array(pcs), np.zeros(4, dtype=np.int64))
    first, second = slice_features(trace, slice_len=2)
    assert first.dpc_counts.sum() == 1  # index 0 has no delta
    assert second.dpc_counts.sum() == 2


def test_bins():
    spec = BinSpec()
    d = np.array([1, 2, 3, 4, 5, 8, 9, 2**20, 2**21, INFINITE])
    assert spec.reuse_bins(d).tolist() == [0, 1, 2, 2, 3, 3, 4, 20, 20, 21]
    deltas = np.array([0, 1, 8, 9, 64, 65, 4096, 4097, -1, -8, -9, -5000])
    assert spec.dpc_bins(deltas).tolist() == [0, 1, 8, 9, 9, 10, 10, 11, 12, 19, 20, 22]
    reuse_labels, dpc_labels = spec.labels()
    assert len(reuse_labels) == spec.n_reuse and len(dpc_labels) == spec.n_dpc


def test_inter_regime_distance_exceeds_intra():
    trace, truth, _ = synth.generate_synthetic(synth.regime_spec([0, 2], [1000, 1000]))
    f = slice_features(trace, slice_len=100)
    intra = max(feature_distance(f[i], f[j])
                for block in (range(0, 9), range(10, 19))
                for i, j in itertools.combinations(block, 2))
    inter = min(feature_distance(f[i], f[j]) for i in range(0, 9) for j in range(10, 19))
    assert inter > intra


def test_merge_identical_slices_to_one():
    feats = slice_features(Trace.from_lines([1, 2] * 50), slice_len=10)
    merged = merge_neighbors(feats[:-1], 0.01)
    assert len(merged) == 1 and merged[0].span == (0, 90)


def test_merge_below_all_distances_is_noop():
    feats = [_features([1, 0], [1], (0, 2)), _features([0, 1], [1], (2, 4)),
             _features([1, 0], [1], (4, 6))]
    assert merge_neighbors(feats, 1.0) == feats
    with pytest.raises(ValueError):
        merge_neighbors(feats, 0)


def test_merge_aabbaa_plant():
    trace, _, _ = synth.generate_synthetic(synth.regime_spec([0, 1, 0], [600, 600, 600]))
    segments = merge_neighbors(slice_features(trace, slice_len=100))
    assert len(segments) == 3
    for seg, (lo, hi) in zip(segments, [(0, 600), (600, 1200), (1200, 1800)]):
        assert abs(seg.span[0] - lo) <= 100 and abs(seg.span[1] - hi) <= 100


def test_merged_features_are_weighted_means():
    a = _features([3, 1], [2, 2], (0, 4))
    b = _features([0, 8], [1, 7], (4, 12))
    m = a.merged(b)
    w = np.array([4, 8]) / 12
    assert np.allclose(m.reuse_hist, w[0] * a.reuse_hist + w[1] * b.reuse_hist)
    assert np.allclose(m.dpc_hist, w[0] * a.dpc_hist + w[1] * b.dpc_hist)
    assert m.span == (0, 12)


@settings(max_examples=200)
@given(random_features, st.floats(0.05, 3.0))
def test_merge_properties(feats, threshold):
    merged = merge_neighbors(feats, threshold)
    assert merged[0].span[0] == feats[0].span[0] and merged[-1].span[1] == feats[-1].span[1]
    for a, b in zip(merged, merged[1:]):
        assert a.span[1] == b.span[0]
        assert feature_distance(a, b) >= threshold
    assert sum(m.reuse_counts.sum() for m in merged) == sum(f.reuse_counts.sum() for f in feats)


@settings(max_examples=200)
@given(random_features, st.floats(0.05, 2.0), st.floats(0.0, 2.0))
def test_merge_threshold_monotone(feats, low, extra):
    assert len(merge_neighbors(feats, low + extra)) <= len(merge_neighbors(feats, low))


def test_global_cluster_examples():
    one = [_features([1, 1], [2], (0, 10))]
    assert global_cluster(one).labels.tolist() == [0] * 10
    a = _features([4, 0], [4], (0, 4))
    b = _features([0, 4], [4], (4, 8))
    a2 = _features([4, 0], [4], (8, 12))
    labels = global_cluster([a, b, a2]).labels
    assert labels.tolist() == [0] * 4 + [1] * 4 + [0] * 4
    far = [_features(np.eye(3, dtype=int)[i] * 5, [1], (2 * i, 2 * i + 2)) for i in range(3)]
    assert global_cluster(far).num_phases == 3


def test_aba_plant_labels():
    trace, truth, _ = synth.generate_synthetic(synth.regime_spec([4, 1, 4], [800, 800, 800]))
    found = phases.find_phases(trace, slice_len=100)
    assert [p for _, _, p in found.spans()] == [0, 1, 0]
    assert label_agreement(found, truth) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
def test_complete_linkage_matches_scipy(n, seed, threshold):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2))
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).sum(-1)
    ours = complete_linkage(dist, threshold)
    assert same_partition(ours, scipy_complete_linkage(dist, threshold))


def test_phase_frequency_table_examples():
    A, B = 5, 6
    trace = Trace.from_lines([A, A, B])
    assert phase_frequency_table(trace, [0, 0, 0]).counts == {(0, A): 2, (0, B): 1}
    assert phase_frequency_table(trace, [0, 1, 1]).counts == {(0, A): 1, (1, A): 1, (1, B): 1}
    with pytest.raises(ValueError):
        phase_frequency_table(trace, [0, 1])


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 3)), min_size=1, max_size=50))
def test_frequency_table_total(pairs):
    trace = Trace.from_lines([p[0] for p in pairs])
    table = phase_frequency_table(trace, [p[1] for p in pairs])
    assert table.total() == len(pairs)


def test_labeling_requires_contiguous_ids():
    with pytest.raises(ValueError):
        PhaseLabeling([0, 2])
    assert PhaseLabeling([1, 0, 1]).num_phases == 2


@settings(max_examples=150)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_label_agreement_matches_oracles(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    got = label_agreement(pred, truth)
    assert got == pytest.approx(agreement_by_enumeration(pred, truth))
    assert got == pytest.approx(best_permutation_agreement(pred, truth))


def test_label_agreement_is_permutation_invariant():
    truth = [0, 0, 1, 1, 2, 2]
    assert label_agreement([2, 2, 0, 0, 1, 1], truth) == 1.0
    assert label_agreement([0, 0, 0, 0, 0, 0], truth) == pytest.approx(2 / 6)


def test_write_histograms(tmp_path, default_run):
    feats = slice_features(default_run[0], slice_len=500)
    phases.write_histograms(tmp_path / "h.csv", feats)
    rows = (tmp_path / "h.csv").read_text().splitlines()
    spec = BinSpec()
    assert len(rows) == len(feats) + 1
    assert len(rows[0].split(",")) == 2 + spec.n_reuse + spec.n_dpc
    assert rows[1].startswith("0,500,")
