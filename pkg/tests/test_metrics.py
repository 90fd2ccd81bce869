import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avsl import kernels
from avsl import _pykernels
from avsl.metrics import (TAUS, PredictionMap, auc, binarize, ciou, ciou_curve, consensus_gt, dice,
                          evaluate, iou, prediction_map, random_baseline, resize_bilinear)


def brute_ciou(G, B):
    """Direct double loop over pixels."""
    inter = gsum = fp = 0.0
    for i in range(G.shape[0]):
        for j in range(G.shape[1]):
            inter += G[i, j] * B[i, j]
            gsum += G[i, j]
            if G[i, j] == 0:
                fp += B[i, j]
    denom = gsum + fp
    return inter / denom if denom else 0.0


def random_boxes(rng, M, H, W, max_per=2):
    boxes = []
    for a in range(M):
        for _ in range(rng.integers(1, max_per + 1)):
            x0, x1 = sorted(rng.choice(W + 1, 2, replace=False))
            y0, y1 = sorted(rng.choice(H + 1, 2, replace=False))
            boxes.append((a, int(x0), int(y0), int(x1), int(y1)))
    return boxes


# ------------------------------------------------------------------ consensus


def test_consensus_identical_boxes_is_binary():
    boxes = [(a, 2, 3, 6, 7) for a in range(3)]
    G = consensus_gt(boxes, 3, 10, 10)
    assert set(np.unique(G)) == {0.0, 1.0}
    assert G[3:7, 2:6].all() and G.sum() == 16


def test_consensus_single_annotator_fraction():
    G = consensus_gt([(0, 0, 0, 2, 2)], 3, 4, 4)
    assert G[0, 0] == pytest.approx(1 / 3)
    assert G[3, 3] == 0


def test_consensus_no_boxes():
    assert not consensus_gt([], 3, 8, 8).any()


def test_consensus_needs_annotators():
    with pytest.raises(ValueError):
        consensus_gt([], 0, 8, 8)


def test_consensus_merges_boxes_of_one_annotator():
    G = consensus_gt([(0, 0, 0, 3, 3), (0, 1, 1, 4, 4)], 1, 4, 4)
    assert G.max() == 1.0


# -------------------------------------------------------------------- binarize


def test_binarize_examples():
    up = np.array([[0.0, 0.4, 0.6, 1.0]])
    assert not binarize(up, 1.0).any()
    np.testing.assert_array_equal(binarize(up, 0.0), [[0, 1, 1, 1]])
    np.testing.assert_array_equal(binarize(np.array([0.4, 0.6]), 0.5), [0, 1])


# ------------------------------------------------------------------------ cIoU


def test_ciou_hand_examples():
    G = np.array([[1, 1 / 3], [0, 0]])
    assert ciou(G, np.array([[1, 1], [0, 0]])) == pytest.approx(1.0, abs=1e-12)
    assert ciou(G, np.array([[0, 1], [1, 0]])) == pytest.approx(1 / 7, abs=1e-12)


def test_ciou_perfect_binary():
    G = consensus_gt([(0, 1, 1, 5, 4)], 1, 8, 8)
    assert ciou(G, (G > 0).astype(int)) == 1.0


def test_ciou_empty_is_zero():
    assert ciou(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0


def test_ciou_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        M = int(rng.integers(1, 4))
        G = consensus_gt(random_boxes(rng, M, 8, 8), M, 8, 8)
        B = rng.integers(0, 2, size=(8, 8))
        assert ciou(G, B) == pytest.approx(brute_ciou(G, B), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ciou_binary_equals_iou(seed):
    rng = np.random.default_rng(seed)
    G = consensus_gt(random_boxes(rng, 1, 8, 8), 1, 8, 8)
    B = rng.integers(0, 2, size=(8, 8))
    assert ciou(G, B) == iou(G, B)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ciou_bounded_and_false_positives_never_help(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    G = consensus_gt(random_boxes(rng, M, 8, 8), M, 8, 8)
    B = rng.integers(0, 2, size=(8, 8))
    c = ciou(G, B)
    assert 0.0 <= c <= 1.0
    bg = np.argwhere((G == 0) & (B == 0))
    if len(bg):
        B2 = B.copy()
        B2[tuple(bg[rng.integers(len(bg))])] = 1
        assert ciou(G, B2) <= c


# ------------------------------------------------------------------------- AUC


def test_auc_constant_curves():
    assert auc(np.zeros(101)) == 0.0
    assert auc(np.ones(101)) == pytest.approx(1.0, abs=1e-12)


def test_auc_linear_is_exact():
    curve = [(t, 1 - t) for t in TAUS]
    assert auc(curve) == pytest.approx(0.5, abs=1e-12)


# ------------------------------------------------------------------------ Dice


def test_dice_as_printed():
    G = consensus_gt([(0, 0, 0, 3, 3)], 1, 4, 4)
    assert dice(G, G) == pytest.approx(0.5)
    assert dice(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0
    assert dice(np.array([[1, 0]]), np.array([[1, 1]])) == pytest.approx(1 / 3)
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


# ------------------------------------------------------------ post-processing


def test_bilinear_resize_matches_torch():
    import torch

    x = np.random.default_rng(1).normal(size=(14, 14))
    ref = torch.nn.functional.interpolate(torch.as_tensor(x)[None, None], size=(256, 256),
                                          mode="bilinear", align_corners=False)[0, 0].numpy()
    np.testing.assert_allclose(resize_bilinear(x, (256, 256)), ref, atol=1e-12)


def test_prediction_map_range_and_max():
    pm = prediction_map(np.random.default_rng(2).uniform(size=(14, 14)))
    assert pm.upsampled.shape == (256, 256)
    assert pm.upsampled.min() == 0.0 and pm.upsampled.max() == 1.0


def test_constant_prediction_is_half_and_thresholds_to_nothing():
    pm = prediction_map(np.full((14, 14), 1 / 196))
    assert np.all(pm.upsampled == 0.5)
    assert not binarize(pm, 0.5).any()


def test_random_baseline_reproducible_and_bounded():
    a = random_baseline(np.random.default_rng(7))
    b = random_baseline(np.random.default_rng(7))
    np.testing.assert_array_equal(a.upsampled, b.upsampled)
    assert a.upsampled.min() >= 0 and a.upsampled.max() <= 1


# --------------------------------------------------------------------- kernels


@pytest.mark.parametrize("seed", range(5))
def test_compiled_and_python_sweeps_agree(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    G = consensus_gt(random_boxes(rng, M, 64, 64), M, 64, 64)
    pred = rng.uniform(size=(64, 64))
    pred[:4] = 0.5  # values exactly on a threshold
    ref = _pykernels.ciou_sweep(G, pred, TAUS)
    np.testing.assert_allclose(kernels.ciou_sweep(G, pred, TAUS), ref, atol=1e-12)


def test_sweep_matches_pointwise_ciou():
    rng = np.random.default_rng(3)
    G = consensus_gt(random_boxes(rng, 3, 32, 32), 3, 32, 32)
    pm = PredictionMap(None, rng.uniform(size=(32, 32)))
    curve = ciou_curve(G, pm)
    for k in (0, 17, 50, 99, 100):
        assert curve[k] == pytest.approx(ciou(G, binarize(pm, TAUS[k])), abs=1e-12)


def test_compiled_backend_is_active():
    pytest.importorskip("avsl._ckernels")
    assert kernels.BACKEND == "cython"


def test_evaluate_report_fields():
    G = consensus_gt([(0, 0, 0, 128, 256)], 1)
    pm = PredictionMap(None, np.where(np.arange(256)[None, :] < 128, 1.0, 0.0) * np.ones((256, 1)))
    r = evaluate([("x", G, pm)])
    d = r.to_dict()
    assert d["ciou@0.5"] == 1.0
    assert len(d["curve"]) == 101
    assert 0 <= d["auc"] <= 1
    assert d["per_sample"] == [{"id": "x", "ciou": 1.0}]
