import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anodfd.data import SynthConfig, generate_dataset, read_pnm
from anodfd.errors import DataIOError, UsageError
from anodfd.metrics import (ABLATION_HEADER, ConfusionCounts, _dedupe_layers, ablation_run, confusion_counts,
                            export_features, f1_from_pre_re, fps_benchmark, iou_from_pre_re, metrics_from_counts,
                            normalize_to_uint8, read_fmap, roc_auc_eer, write_bench_csv, write_fmap,
                            write_metrics_csv, write_roc_csv)
from anodfd.model import AnoDFDNet
from anodfd.training import TrainConfig
from conftest import SMALL

# (precision, recall) -> printed (f1, iou) for the three reference datasets
REFERENCE_ROWS = {
    "diff": ((0.7416, 0.7584), (0.7499, 0.5999)),
    "fb": ((0.8328, 0.7891), (0.8104, 0.6812)),
    "ol": ((0.8395, 0.8227), (0.8310, 0.7109)),
}


def count_oracle(maps, masks, thr):
    tp = fp = fn = tn = 0
    for a, y in zip(maps, masks):
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                p, t = a[i, j] >= thr, y[i, j] == 1
                if p and t:
                    tp += 1
                elif p:
                    fp += 1
                elif t:
                    fn += 1
                else:
                    tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def rank_oracle(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# -- counts ---------------------------------------------------------------------

def test_perfect_prediction():
    y = (np.random.default_rng(0).random((8, 8)) > 0.6).astype(float)
    c = confusion_counts([np.clip(y, 0.01, 0.99)], [y], 0.5)
    assert c.fp == c.fn == 0 and c.tp == y.sum()


def test_all_negative():
    c = confusion_counts([np.full((4, 4), 0.2)], [np.zeros((4, 4))], 0.5)
    assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 0, 16)
    m = metrics_from_counts(c)
    assert m["pre"] == m["re"] == m["iou"] == m["oa"] == 1.0


def test_threshold_is_inclusive():
    c = confusion_counts([np.array([[0.5, 0.4999]])], [np.array([[1, 1]])], 0.5)
    assert (c.tp, c.fn) == (1, 1)


def test_counts_match_brute_force_on_100_instances():
    r = np.random.default_rng(11)
    for _ in range(100):
        maps = [r.random((8, 8)) for _ in range(r.integers(1, 4))]
        masks = [(r.random((8, 8)) > 0.7).astype(int) for _ in maps]
        thr = float(r.uniform(0.05, 0.95))
        assert confusion_counts(maps, masks, thr) == count_oracle(maps, masks, thr)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_counts_are_additive(seed):
    r = np.random.default_rng(seed)
    a = [r.random((5, 6)) for _ in range(3)]
    y = [(r.random((5, 6)) > 0.5).astype(int) for _ in range(3)]
    assert confusion_counts(a, y) == confusion_counts(a[:1], y[:1]) + confusion_counts(a[1:], y[1:])


def test_count_errors():
    with pytest.raises(UsageError):
        confusion_counts([], [])
    with pytest.raises(UsageError):
        confusion_counts([np.zeros((2, 2))], [np.zeros((2, 3))])
    with pytest.raises(UsageError):
        confusion_counts([np.zeros((2, 2))], [np.zeros((2, 2))], threshold=1.0)


# -- scalar metrics ---------------------------------------------------------------------

def test_metrics_by_definition():
    m = metrics_from_counts(ConfusionCounts(2, 1, 1, 96))
    assert m["pre"] == pytest.approx(2 / 3) and m["re"] == pytest.approx(2 / 3)
    assert m["oa"] == pytest.approx(0.98) and m["f1"] == pytest.approx(2 / 3) and m["iou"] == pytest.approx(0.5)


def test_degenerate_denominators():
    m = metrics_from_counts(ConfusionCounts(0, 0, 5, 10))
    assert m["pre"] == 0.0 and m["re"] == 0.0 and m["f1"] == 0.0 and m["iou"] == 0.0
    m = metrics_from_counts(ConfusionCounts(0, 3, 0, 10))
    assert m["re"] == 0.0 and m["pre"] == 0.0


def test_iou_identity_on_1000_count_tuples():
    r = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        c = ConfusionCounts(*(int(v) for v in r.integers(0, 10**6, 4)))
        m = metrics_from_counts(c)
        if m["pre"] + m["re"] > 0:
            worst = max(worst, abs(m["iou"] - m["f1"] / (2 - m["f1"])))
    assert worst <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(0, 10**5)] * 4), st.integers(1, 1000))
def test_scale_invariance(counts, k):
    a = metrics_from_counts(ConfusionCounts(*counts))
    b = metrics_from_counts(ConfusionCounts(*(k * v for v in counts)))
    for key in a:
        assert a[key] == pytest.approx(b[key], rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("name", sorted(REFERENCE_ROWS))
def test_reference_rows_consistency(name):
    (pre, re), (f1, iou) = REFERENCE_ROWS[name]
    assert abs(f1_from_pre_re(pre, re) - f1) <= 1e-4
    assert abs(iou_from_pre_re(pre, re) - iou) <= 1e-4


# -- ROC -------------------------------------------------------------------------

def test_perfect_and_inverted_ranking():
    s = np.array([0.9, 0.8, 0.3, 0.1])
    y = np.array([1, 1, 0, 0])
    good, bad = roc_auc_eer(s, y), roc_auc_eer(s, 1 - y)
    assert good.auc == 1.0 and good.eer == 0.0
    assert bad.auc == 0.0 and bad.eer == 1.0


def test_curve_shape():
    r = np.random.default_rng(3)
    s, y = r.random(300), (r.random(300) > 0.6).astype(int)
    roc = roc_auc_eer(s, y)
    assert np.isinf(roc.thresholds[0]) and np.all(np.diff(roc.thresholds) < 0)
    assert np.all(np.diff(roc.tpr) >= 0) and np.all(np.diff(roc.fpr) >= 0)
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0) and (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)


def test_auc_matches_ranking_oracle_on_50_sets():
    r = np.random.default_rng(8)
    for _ in range(50):
        n = int(r.integers(20, 200))
        s = r.permutation(n) / n + r.random() * 1e-3
        y = (r.random(n) > 0.5).astype(int)
        y[:2] = [0, 1]
        assert abs(roc_auc_eer(s, y).auc - rank_oracle(s, y)) <= 1e-12


def test_auc_with_ties_matches_ranking_oracle():
    r = np.random.default_rng(9)
    s = r.integers(0, 10, 150) / 10
    y = (r.random(150) > 0.5).astype(int)
    assert abs(roc_auc_eer(s, y).auc - rank_oracle(s, y)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_auc_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    s, y = r.random(80), (r.random(80) > 0.5).astype(int)
    y[:2] = [0, 1]
    a = roc_auc_eer(s, y).auc
    assert roc_auc_eer(np.exp(3 * s) - 7, y).auc == pytest.approx(a, abs=1e-12)
    assert roc_auc_eer(s**3, y).auc == pytest.approx(a, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_eer_point_balances_error_rates(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(4, 200))
    s, y = r.random(n), (r.random(n) > 0.5).astype(int)
    y[:2] = [0, 1]
    roc = roc_auc_eer(s, y)
    # the interpolated operating point lies on the segment where fpr - (1 - tpr) changes sign
    gap = roc.fpr - (1 - roc.tpr)
    k = int(np.argmax(gap >= 0))
    if k == 0 or gap[k] == 0:
        assert abs(roc.eer - roc.fpr[k]) <= 1e-12
        return
    t = -gap[k - 1] / (gap[k] - gap[k - 1])
    fpr = roc.fpr[k - 1] + t * (roc.fpr[k] - roc.fpr[k - 1])
    tpr = roc.tpr[k - 1] + t * (roc.tpr[k] - roc.tpr[k - 1])
    assert abs(roc.eer - fpr) <= 1e-12
    assert abs(fpr - (1 - tpr)) <= 1e-9
    assert 0 <= roc.eer <= 1


def test_single_class_errors_name_the_class():
    with pytest.raises(UsageError, match="positive"):
        roc_auc_eer([0.1, 0.2], [0, 0])
    with pytest.raises(UsageError, match="negative"):
        roc_auc_eer([0.1, 0.2], [1, 1])


# -- csv ---------------------------------------------------------------------------

def test_csv_writers(tmp_path):
    write_metrics_csv(tmp_path / "metrics.csv", 0.5, metrics_from_counts(ConfusionCounts(2, 1, 1, 96)))
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["threshold", "pre", "re", "oa", "f1", "iou"]
    assert rows[1][0] == "0.500000" and rows[1][-1] == "0.500000"
    write_roc_csv(tmp_path / "roc.csv", roc_auc_eer([0.9, 0.1, 0.5], [1, 0, 1]))
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["threshold", "fpr", "tpr"] and rows[1][0] == "inf"


# -- speed ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_pairs():
    return generate_dataset(SynthConfig.preset("fb-style", 6, 32, seed=0))


def test_fps_report(small_pairs, tmp_path):
    rep = fps_benchmark(AnoDFDNet(SMALL), small_pairs[:2], warmup=5, iters=30)
    assert rep.iters == 30 and rep.warmup == 5 and rep.layers == SMALL.layers
    assert rep.fps == pytest.approx(1000.0 / rep.mean_ms)
    write_bench_csv(tmp_path / "bench.csv", [rep])
    write_bench_csv(tmp_path / "bench.csv", [rep])
    rows = list(csv.reader(open(tmp_path / "bench.csv")))
    assert rows[0] == ["layers", "fps", "mean_ms", "std_ms", "warmup", "iters"] and len(rows) == 3


@pytest.mark.parametrize("kw", [{"iters": 0}, {"iters": 29}, {"warmup": 4}])
def test_fps_preconditions(small_pairs, kw):
    with pytest.raises(UsageError):
        fps_benchmark(AnoDFDNet(SMALL), small_pairs[:1], **kw)


# -- ablation ----------------------------------------------------------------------------

def test_duplicate_layer_counts_warn():
    with pytest.warns(UserWarning, match="more than once"):
        assert _dedupe_layers([0, 2, 0, 1, 2]) == [0, 2, 1]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert _dedupe_layers([0, 1]) == [0, 1]


def test_ablation_isolates_failed_rows(small_pairs, tmp_path):
    test = generate_dataset(SynthConfig.preset("fb-style", 3, 32, seed=0, split="test"))
    with pytest.warns(UserWarning):
        rows = ablation_run(SMALL, [0, -1, 1, 0], small_pairs, test,
                            TrainConfig(epochs=1), tmp_path, seeds=[0, 1], bench_iters=30)
    assert [r.layers for r in rows] == [0, -1, 1]
    assert [r.failed for r in rows] == [False, True, False]
    assert "ConfigError" in rows[1].error
    assert len(rows[0].runs) == 2
    assert rows[0].f1 == pytest.approx(np.mean([m["f1"] for m in rows[0].runs]))
    out = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert tuple(out[0]) == ABLATION_HEADER
    assert out[2][1:] == ["nan"] * 6
    assert all(0 <= float(v) <= 1 for v in out[1][1:6])


# -- feature export --------------------------------------------------------------------------

def test_constant_channel_is_mid_grey():
    assert np.all(normalize_to_uint8(np.full((3, 4), 2.5)) == 128)
    ramp = normalize_to_uint8(np.arange(6.0).reshape(2, 3))
    assert ramp.min() == 0 and ramp.max() == 255


def test_fmap_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 5, 7)).astype(np.float32)
    write_fmap(tmp_path / "a.f32raw", a)
    raw = (tmp_path / "a.f32raw").read_bytes()
    assert raw[:4] == b"FMAP" and len(raw) == 16 + a.size * 4
    assert read_fmap(tmp_path / "a.f32raw").tobytes() == a.tobytes()


def test_export_every_decoder_stage(small_pairs, tmp_path):
    from anodfd import tensor as T

    model = AnoDFDNet(SMALL)
    files = export_features(model, small_pairs[0], tmp_path / "feat")
    cur, his = (np.asarray(x).transpose(2, 0, 1)[None] / 255.0 for x in (small_pairs[0].cur, small_pairs[0].his))
    with T.no_grad():
        _, inter = model.forward(cur.astype(np.float32), his.astype(np.float32), return_intermediates=True)
    for k, stage in enumerate(inter["decoder"]):
        fmap = stage.data[0]
        assert read_fmap(tmp_path / "feat" / f"d{k}.f32raw").tobytes() == fmap.astype(np.float32).tobytes()
        pnms = sorted((tmp_path / "feat").glob(f"d{k}_c*.pnm"))
        assert len(pnms) == fmap.shape[0]
        assert read_pnm(pnms[0]).shape[:2] == fmap.shape[1:]
    assert len(files) == sum(1 + s.shape[1] for s in inter["decoder"])


def test_export_to_unwritable_location(small_pairs, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataIOError):
        export_features(AnoDFDNet(SMALL), small_pairs[0], blocker / "sub")
