import json

import numpy as np
import pytest

from promptperc.metrics import (
    MetricReport,
    classification_accuracy,
    extract_keypoint,
    miou,
    pck,
    pixel_accuracy,
)
from promptperc.synthdata import rasterize_keypoint_heatmap


def test_extract_one_hot():
    hm = np.zeros((10, 10))
    hm[7, 5] = 1.0
    kp = extract_keypoint(hm)
    assert kp.coord == (5.0, 7.0)
    assert kp.confidence == 1.0
    assert not kp.flat


def test_extract_tie_goes_to_first():
    hm = np.zeros((4, 4))
    hm.flat[3] = hm.flat[9] = 2.0
    assert extract_keypoint(hm).coord == (3.0, 0.0)


def test_extract_flat_map():
    kp = extract_keypoint(np.full((1, 5, 5), 0.3))
    assert kp.coord == (0.0, 0.0) and kp.flat


def test_extract_rasterized_peak():
    hm = rasterize_keypoint_heatmap((12, 21), 1.5, 32)
    assert extract_keypoint(hm).coord == (12.0, 21.0)


def test_pck_examples():
    g = np.array([[10.0, 10.0]])
    assert pck(g, g, (0, 0, 100, 100), 0.2) == 100.0
    assert pck([[29.0, 10.0]], g, (0, 0, 100, 100), 0.2) == 100.0
    assert pck([[31.0, 10.0]], g, (0, 0, 100, 100), 0.2) == 0.0
    gts = np.zeros((4, 2))
    preds = np.array([[1, 0], [0, 19], [25, 0], [0, -40]], float)
    assert pck(preds, gts, (0, 0, 100, 50), 0.2) == 50.0


def test_pck_visibility_and_errors():
    gts = np.array([[0, 0, 1], [5, 5, 0]], float)
    assert pck([[0, 0], [90, 90]], gts, (0, 0, 10, 10), 0.1) == 100.0
    with pytest.raises(ValueError):
        pck([[0, 0]], [[0, 0, 0]], (0, 0, 10, 10), 0.1)
    with pytest.raises(ValueError):
        pck([[0, 0]], [[0, 0]], (0, 0, 0, 10), 0.1)


def test_pck_translation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p, g = rng.uniform(0, 50, (6, 2)), rng.uniform(0, 50, (6, 2))
        box = np.array([rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(5, 60), rng.uniform(5, 60)])
        t = rng.uniform(-100, 100, 2)
        moved = box.copy()
        moved[:2] += t
        assert pck(p, g, box, 0.2) == pck(p + t, g + t, moved, 0.2)


def test_miou_examples():
    m = np.zeros((8, 8), bool)
    m[2:5, 1:6] = True
    assert miou(m, m) == 1.0 and pixel_accuracy(m, m) == 1.0
    assert miou(m, ~m) == 0.0
    left = np.zeros((4, 4), bool)
    left[:, :2] = True
    full = np.ones((4, 4), bool)
    # fg IoU 8/16, bg IoU 0/8
    assert miou(left, full) == pytest.approx(0.25)
    assert pixel_accuracy(left, full) == 0.5


def test_miou_empty_class_counts_as_one():
    z = np.zeros((3, 3), bool)
    assert miou(z, z) == 1.0


def test_miou_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a, b = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.4
        assert miou(a, b) == miou(b, a)


def test_classification_accuracy():
    assert classification_accuracy([3.0, -2.0], [1, 0]) == 100.0
    assert classification_accuracy([0.0, 0.0, 0.0], [0, 0, 0]) == 0.0
    assert classification_accuracy([1.0, 1.0], [1, 0]) == 50.0
    with pytest.raises(ValueError):
        classification_accuracy([], [])


def test_report_macro_and_serialization():
    r = MetricReport("PCK@0.2", {"a": 50.0, "b": 75.0, "c": 100.0}, shots=5, mode="ID", seed=3)
    assert r.macro == pytest.approx(75.0, abs=1e-9)
    assert json.loads(r.to_json())["macro"] == pytest.approx(75.0)
    lines = r.to_csv("# seed=3\n").splitlines()
    assert lines[0] == "# seed=3"
    assert lines[1] == "class,metric,value,shots,mode,seed"
    assert lines[-1].startswith("macro,PCK@0.2,75.000000")
