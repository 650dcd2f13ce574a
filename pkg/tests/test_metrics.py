import numpy as np
import pytest

from onestream import metrics as M


def test_success_all_ones():
    # every tau < 1 passes, tau = 1 fails: 100/101
    assert M.success_auc([1.0] * 7) == pytest.approx(100.0 * 100 / 101)


def test_success_all_zero():
    assert M.success_auc([0.0, 0.0]) == 0.0


def test_success_constant_half():
    # IoU 0.5 beats thresholds 0.00..0.49 -> 50 of 101
    assert M.success_auc([0.5] * 3) == pytest.approx(100.0 * 50 / 101)


def test_success_empty_errors():
    with pytest.raises(ValueError):
        M.success_auc([])


def test_precision_all_zero_distance():
    # strict inequality at delta = 0 -> 100/101
    assert M.precision_auc([0.0] * 5) == pytest.approx(100.0 * 100 / 101)


def test_precision_all_far():
    assert M.precision_auc([2.5, 3.0]) == 0.0


def test_precision_one_meter():
    # d = 1.0 passes delta in {1.02, ..., 2.00} -> 50 of 101
    count = int((M.DIST_THRESHOLDS > 1.0).sum())
    assert M.precision_auc([1.0]) == pytest.approx(100.0 * count / 101)


def test_metrics_monotone():
    rng = np.random.default_rng(0)
    ious = rng.uniform(0, 1, 50)
    better = np.clip(ious + 0.05, 0, 1)
    assert M.success_auc(better) >= M.success_auc(ious)
    dists = rng.uniform(0, 2.5, 50)
    assert M.precision_auc(np.maximum(dists - 0.1, 0)) >= M.precision_auc(dists)


def test_metrics_permutation_invariant():
    rng = np.random.default_rng(1)
    ious = rng.uniform(0, 1, 40)
    perm = rng.permutation(40)
    assert M.success_auc(ious) == pytest.approx(M.success_auc(ious[perm]))


def test_pooled_equals_frame_weighted_mean():
    rng = np.random.default_rng(2)
    cats = [rng.uniform(0, 1, n) for n in (10, 25, 5)]
    pooled = M.success_auc(np.concatenate(cats))
    weighted = sum(M.success_auc(c) * len(c) for c in cats) / sum(len(c) for c in cats)
    assert pooled == pytest.approx(weighted)


def test_sparsity_bins_partition():
    rng = np.random.default_rng(3)
    n = 60
    ious = rng.uniform(0, 1, n)
    dists = rng.uniform(0, 2, n)
    counts = rng.integers(0, 400, n)
    bins = M.sparsity_bins(ious, dists, counts, edges=(10, 50, 150))
    assert sum(b.frame_count for b in bins.values()) == n
    rebuilt = sorted(v for b in bins.values() for v in b.ious)
    assert np.allclose(rebuilt, sorted(ious))


def test_sparsity_single_bin_equals_global():
    ious = [0.4, 0.6, 0.9]
    dists = [0.1, 0.3, 0.2]
    bins = M.sparsity_bins(ious, dists, [20, 25, 30], edges=(10, 50, 150))
    b = bins["[10,50)"]
    assert b.frame_count == 3
    assert b.success == pytest.approx(M.success_auc(ious))
    assert b.precision == pytest.approx(M.precision_auc(dists))


def test_report_json_round_trip(tmp_path):
    import json

    rep = M.report([0.5, 0.9], [0.1, 0.4])
    rep.bins = M.sparsity_bins(rep.ious, rep.dists, [5, 500])
    path = tmp_path / "report.json"
    M.write_report(path, rep, config_hash="abcd")
    payload = json.loads(path.read_text())
    assert payload["success"] == pytest.approx(rep.success)
    assert payload["config_hash"] == "abcd"
    frames = (tmp_path / "report.json.frames.csv").read_text().strip().splitlines()
    assert len(frames) == 3  # header + 2 rows
