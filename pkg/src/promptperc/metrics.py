"""Evaluation metrics: PCK, binary mIoU, pixel accuracy, classification accuracy."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class KeypointPrediction:
    coord: tuple[float, float]  # (x, y) pixels
    confidence: float
    flat: bool = False  # True when every value in the map was equal


def extract_keypoint(heatmap: np.ndarray) -> KeypointPrediction:
    """Argmax of a single-channel map; ties go to the smallest row-major index."""
    hm = np.asarray(heatmap)
    if hm.ndim == 3:
        if hm.shape[0] != 1:
            raise ValueError("heatmap must be single-channel")
        hm = hm[0]
    if hm.ndim != 2:
        raise ValueError("heatmap must be 2-D")
    idx = int(np.argmax(hm))  # numpy returns the first occurrence
    row, col = divmod(idx, hm.shape[1])
    return KeypointPrediction((float(col), float(row)), float(hm.flat[idx]), bool(hm.min() == hm.max()))


def pck(preds, gts, bbox: Sequence[float], sigma: float, visible=None) -> float:
    """Percentage of visible keypoints within sigma * longest bbox side."""
    p = np.asarray(preds, float).reshape(-1, 2)
    g = np.asarray(gts, float)
    if g.ndim == 2 and g.shape[1] == 3 and visible is None:
        visible = g[:, 2] > 0
    g = g[:, :2].reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError("predictions and ground truth are not aligned")
    vis = np.ones(len(g), bool) if visible is None else np.asarray(visible, bool)
    if not vis.any():
        raise ValueError("no visible keypoints")
    bw, bh = float(bbox[2]), float(bbox[3])
    if bw <= 0 or bh <= 0:
        raise ValueError("invalid bbox")
    thr = sigma * max(bw, bh)
    d = np.sqrt(((p - g) ** 2).sum(axis=1))
    # count first, divide once: one rounding step
    return 100.0 * int((d[vis] <= thr).sum()) / int(vis.sum())


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0  # class absent from both masks
    return float(np.logical_and(a, b).sum() / union)


def miou(pred_mask, gt_mask) -> float:
    """Mean of foreground and background IoU for binary masks."""
    p = np.asarray(pred_mask, bool)
    g = np.asarray(gt_mask, bool)
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    return 0.5 * (_iou(p, g) + _iou(~p, ~g))


def pixel_accuracy(pred_mask, gt_mask) -> float:
    p = np.asarray(pred_mask, bool)
    g = np.asarray(gt_mask, bool)
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    return float((p == g).mean())


def binarize_logits(logits: np.ndarray) -> np.ndarray:
    # sigmoid(z) >= 0.5  <=>  z >= 0
    return np.asarray(logits) >= 0


def classification_accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    if s.size == 0:
        raise ValueError("empty score list")
    if s.shape != y.shape:
        raise ValueError("scores and labels are not aligned")
    prob = 1.0 / (1.0 + np.exp(-s))
    return 100.0 * float(((prob >= threshold) == y).mean())


@dataclass
class MetricReport:
    metric: str
    per_class: dict[str, float]
    shots: int
    mode: str
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def macro(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else float("nan")

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "per_class": self.per_class, "macro": self.macro,
                           "shots": self.shots, "mode": self.mode, "seed": self.seed, **self.extra},
                          sort_keys=True, indent=1)

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "metric", "value", "shots", "mode", "seed"])
        for cls, v in self.per_class.items():
            w.writerow([cls, self.metric, f"{v:.6f}", self.shots, self.mode, self.seed])
        w.writerow(["macro", self.metric, f"{self.macro:.6f}", self.shots, self.mode, self.seed])
        return buf.getvalue()
