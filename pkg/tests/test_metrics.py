import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ovcos.backbone import InvalidInputError
from ovcos.metrics import (
    BASE_METRICS,
    METRIC_ORDER,
    GroundTruth,
    e_measure,
    evaluate,
    f_beta,
    f_beta_weighted,
    gated,
    iou,
    mae,
    nearest_foreground,
    relative_gain,
    s_measure,
)
from ovcos.recognizer import SamplePrediction

from oracles import REFERENCE, random_instance


def test_random_instances_match_dense_references():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        pred, gt = random_instance(rng)
        for name, fn in BASE_METRICS.items():
            assert abs(fn(pred, gt) - REFERENCE[name](pred, gt)) < 1e-6, name


def test_nearest_foreground_ties_on_lattice():
    # Regular lattice of foreground points: many pixels are equidistant to
    # more neighbours than the KD-tree is asked for.
    gt = np.zeros((24, 24), bool)
    gt[2::5, 2::5] = True
    gt[12, 12] = True
    dist, idx = nearest_foreground(gt)
    fg = np.argwhere(gt)
    for y in range(24):
        for x in range(24):
            d = np.hypot(fg[:, 0] - y, fg[:, 1] - x)
            best = np.flatnonzero(np.isclose(d, d.min(), rtol=0, atol=1e-12))
            ry, rx = fg[best[0]]
            assert idx[y, x] == ry * 24 + rx
            assert abs(dist[y, x] - d.min()) < 1e-12


def test_mae_examples():
    gt = np.array([[0, 1], [0, 1]])
    assert mae(gt.astype(float), gt) == 0
    assert mae(1.0 - gt, gt) == 1
    assert mae(np.array([[0.25, 0.75], [0, 1]]), gt) == 0.125
    with pytest.raises(InvalidInputError, match="shape"):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert iou(a.astype(float), a) == 1
    assert iou(a.astype(float), ~a) == 0
    p = np.array([[1.0, 1.0], [0, 0]])
    g = np.array([[1, 0], [1, 0]])
    assert abs(iou(p, g) - 1 / 3) < 1e-15
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1


def test_f_beta_examples():
    gt = np.zeros((4, 4), bool)
    gt[0, :2] = True
    assert f_beta(gt.astype(float), gt) == 1
    assert f_beta(np.zeros((4, 4)), gt) == 0
    pred = np.zeros((4, 4))
    pred[0] = 1.0  # 4 positives, 2 true: P = 0.5, R = 1
    assert abs(f_beta(pred, gt) - 1.3 * 0.5 / (0.3 * 0.5 + 1)) < 1e-12


def _blob(n=32, r=6):
    y, x = np.mgrid[:n, :n]
    return (y - n / 2) ** 2 + (x - n / 2) ** 2 <= r * r


def test_weighted_f_examples():
    gt = _blob()
    assert abs(f_beta_weighted(gt.astype(float), gt) - 1) < 1e-12
    assert f_beta_weighted(1.0 - gt, gt) <= 0.05
    empty = np.zeros((8, 8), bool)
    assert f_beta_weighted(np.zeros((8, 8)), empty) == 1
    assert f_beta_weighted(np.full((8, 8), 0.9), empty) == 0


def test_s_measure_examples():
    gt = _blob()
    assert abs(s_measure(gt.astype(float), gt) - 1) < 1e-6
    z = np.zeros((5, 5))
    assert s_measure(z, z.astype(bool)) == 1
    assert s_measure(np.ones((5, 5)), np.ones((5, 5), bool)) == 1


def test_e_measure_examples():
    gt = np.zeros((8, 8), bool)
    gt[:, :4] = True
    assert abs(e_measure(gt.astype(float), gt) - 1) < 1e-6
    assert e_measure(1.0 - gt, gt) <= 0.25


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (6, 7), elements=st.floats(0, 1)),
    arrays(np.bool_, (6, 7)),
)
def test_metric_ranges_and_transpose_invariance(pred, gt):
    for name, fn in BASE_METRICS.items():
        v = fn(pred, gt)
        assert 0.0 <= v <= 1.0, name
    for fn in (mae, iou, f_beta):
        assert abs(fn(pred, gt) - fn(pred.T, gt.T)) < 1e-12


def test_gate():
    assert gated(0.8, True) == 0.8
    assert gated(0.8, False) == 0.0
    assert gated(0.1, False, "mae") == 1.0
    assert gated(0.1, True, "mae") == 0.1


def _pred(i, mask, cls):
    return SamplePrediction(i, mask.astype(float), cls, np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("correct,expect_up,expect_mae", [(True, 1.0, 0.0), (False, 0.0, 1.0)])
def test_single_sample_gate(correct, expect_up, expect_mae):
    m = _blob(16, 4)
    rep = evaluate([_pred("a", m, 0 if correct else 1)], [GroundTruth("a", m, 0)])
    for k in METRIC_ORDER:
        assert abs(rep.aggregate[k] - (expect_mae if k == "mae" else expect_up)) < 1e-9


def test_report_invariants():
    rng = np.random.default_rng(0)
    preds, gts = [], []
    for i in range(20):
        p, g = random_instance(rng, 10)
        preds.append(SamplePrediction(str(i), p, int(rng.integers(2)), np.zeros(2), np.zeros(2)))
        gts.append(GroundTruth(str(i), g, int(rng.integers(2))))
    rep = evaluate(preds, gts)
    acc = rep.accuracy
    for k in METRIC_ORDER:
        vals = [r["gated"][k] for r in rep.per_sample]
        assert rep.aggregate[k] == pytest.approx(np.mean(vals), abs=1e-15)
        if k == "mae":
            assert rep.aggregate[k] >= 1 - acc - 1e-12
        else:
            assert rep.aggregate[k] <= acc + 1e-12
    for r in rep.per_sample:
        for k in METRIC_ORDER:
            if k == "mae":
                assert r["gated"][k] >= r["base"][k]
            else:
                assert r["gated"][k] <= r["base"][k]


def test_report_outputs(tmp_path):
    m = _blob(8, 2)
    rep = evaluate([_pred("a", m, 0)], [GroundTruth("a", m, 0)])
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    assert rep.table_header().split("\t") == ["cS_m", "cF_beta^w", "cMAE", "cF_beta", "cE_m", "cIoU"]
    assert rep.table_row("x").split("\t")[0] == "x"
    assert "cIoU" in (tmp_path / "r.csv").read_text()


def test_id_mismatch_listed():
    m = _blob(8, 2)
    with pytest.raises(InvalidInputError, match="'b'"):
        evaluate([_pred("a", m, 0)], [GroundTruth("b", m, 0)])
    with pytest.raises(InvalidInputError):
        evaluate([], [])


def test_relative_gain():
    base = {"sm": 0.5, "wfm": 0.4, "mae": 0.4, "fm": 0.5, "em": 0.5, "iou": 0.4}
    assert relative_gain(base, base) == 0.0
    better = dict(base, mae=0.2)
    # MAE halves: +50% on one of six metrics
    assert abs(relative_gain(better, base) - 0.5 / 6) < 1e-15
