from fractions import Fraction

import numpy as np
import pytest

from liteseg import build_liteseg
from liteseg.metrics import (
    CITYSCAPES_CATEGORY_MAP,
    ConfusionMatrix,
    benchmark_csv,
    benchmark_fps,
    category_miou,
    collapse,
    confusion_update,
    format_benchmark,
    format_iou_table,
    miou,
    per_class_iou,
    pixel_accuracy,
)
from liteseg.model import init_liteseg_weights, toy_config
from liteseg.ops import InvalidLabelError
from liteseg.tensor import ShapeError


def test_hand_tallied_example():
    cm = confusion_update(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    np.testing.assert_allclose(per_class_iou(cm), [0.5, 2 / 3])
    assert miou(cm, exact=True) == Fraction(7, 12)
    assert pixel_accuracy(cm) == 0.75


def test_perfect_prediction_and_ignore():
    t = np.array([[0, 1], [2, 255]])
    cm = ConfusionMatrix(4).update(np.where(t == 255, 0, t), t)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert miou(cm) == 1.0 and cm.total == 3  # class 3 absent everywhere: excluded
    before = cm.counts.copy()
    cm.update(np.zeros((2, 2)), np.full((2, 2), 255))
    assert np.array_equal(cm.counts, before)


def test_absent_class_behaviour():
    cm = ConfusionMatrix(3).update(np.array([0, 2]), np.array([0, 0]))
    iou = per_class_iou(cm)
    assert np.isnan(iou[1]) and iou[2] == 0.0
    assert miou(cm) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        miou(ConfusionMatrix(3))


def test_update_errors():
    with pytest.raises(InvalidLabelError):
        ConfusionMatrix(2).update(np.array([0]), np.array([2]))
    with pytest.raises(InvalidLabelError):
        ConfusionMatrix(2).update(np.array([-1]), np.array([1]))
    with pytest.raises(ShapeError):
        ConfusionMatrix(2).update(np.zeros(3), np.zeros(4))


def test_additivity_bit_exact(rng):
    a_t, a_p = rng.integers(0, 5, (2, 8, 8)), rng.integers(0, 5, (2, 8, 8))
    b_t, b_p = rng.integers(0, 5, (1, 8, 8)), rng.integers(0, 5, (1, 8, 8))
    cm1 = ConfusionMatrix(5).update(a_p, a_t).update(b_p, b_t)
    cm2 = ConfusionMatrix(5).update(np.concatenate([a_p, b_p]), np.concatenate([a_t, b_t]))
    assert np.array_equal(cm1.counts, cm2.counts)


def test_category_collapse():
    # classes 0 and 1 always confused with each other but both in one category
    cm = ConfusionMatrix(3).update(np.array([1, 0, 2]), np.array([0, 1, 2]))
    assert miou(cm) == pytest.approx(1 / 3)
    assert category_miou(cm, [0, 0, 1]) == 1.0
    c = collapse(cm, [0, 0, 1])
    assert c.counts.tolist() == [[2, 0], [0, 1]]
    with pytest.raises(ValueError):
        collapse(cm, [0, 1])


def test_cityscapes_category_map():
    assert len(CITYSCAPES_CATEGORY_MAP) == 19 and max(CITYSCAPES_CATEGORY_MAP) == 6
    cm = ConfusionMatrix(19).update(np.arange(19), np.arange(19))
    assert category_miou(cm) == 1.0
    assert "mIOU" in format_iou_table(cm)


@pytest.fixture(scope="module")
def toy():
    g = build_liteseg(toy_config())
    return g, init_liteseg_weights(g)


def test_benchmark_single_run(toy):
    g, w = toy
    r = benchmark_fps(g, w, (1, 3, 64, 64), burn_in=0, runs=1)
    assert r.mean_fps == pytest.approx(1 / r.latencies[0])
    assert r.padded_hw == (64, 64)


def test_benchmark_pads_and_reports(toy):
    g, w = toy
    calls = []
    r = benchmark_fps(g, w, (1, 3, 45, 80), burn_in=2, runs=5, progress=lambda i, n: calls.append(i))
    assert r.padded_hw == (64, 96) and len(r.latencies) == 5 and len(calls) == 7
    assert r.p50_ms <= r.p95_ms
    assert "FPS" in format_benchmark([r])
    assert benchmark_csv([r]).splitlines()[1].startswith(f"{g.name},80,45,96,64,2,5,")


def test_larger_input_is_slower(toy):
    g, w = toy
    small = benchmark_fps(g, w, (1, 3, 64, 64), burn_in=1, runs=5)
    big = benchmark_fps(g, w, (1, 3, 256, 256), burn_in=1, runs=5)
    assert big.mean_fps < small.mean_fps
