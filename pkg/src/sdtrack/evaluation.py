"""Tracking metrics and the sequence-level tracking harness.

The harness takes the template once from the first annotated frame and, for
every later frame, crops a search region around the previous prediction,
runs the model and maps the normalized box back to sensor pixels. There is
no template update and no window penalty.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .crops import SEARCH_CONTEXT, TEMPLATE_CONTEXT, CropWindow, crop
from .events import GroundTruthBox, SyntheticSequence
from .gtp import DEFAULT_ALPHA, DEFAULT_BETA, aggregate_sequence
from .model import SDTrack

THRESHOLDS = np.linspace(0.0, 1.0, 21)
PR_RADIUS_PX = 20.0


def iou(a, b) -> float:
    """IoU of two corner-form boxes (x1, y1, x2, y2)."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def corners(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou_center(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    return iou(corners(a), corners(b))


def center_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass
class SequenceResult:
    """Per-frame predicted and ground-truth boxes, (cx, cy, w, h) in pixels."""

    pred: list[tuple[float, float, float, float]]
    gt: list[tuple[float, float, float, float]]
    width: int
    height: int
    frames: list[int] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        if len(self.pred) != len(self.gt):
            raise ValueError(f"{len(self.pred)} predictions vs {len(self.gt)} ground-truth boxes")
        if not self.frames:
            self.frames = list(range(len(self.pred)))

    @property
    def ious(self) -> np.ndarray:
        return np.array([iou_center(p, g) for p, g in zip(self.pred, self.gt)])

    @property
    def distances(self) -> np.ndarray:
        return np.array([center_distance(p, g) for p, g in zip(self.pred, self.gt)])

    @property
    def mean_iou(self) -> float:
        return float(self.ious.mean()) if self.pred else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "pred_cx", "pred_cy", "pred_w", "pred_h",
                        "gt_cx", "gt_cy", "gt_w", "gt_h", "iou", "center_dist"])
            for f, p, g, o, d in zip(self.frames, self.pred, self.gt, self.ious, self.distances):
                w.writerow([f, *(repr(float(v)) for v in p), *(repr(float(v)) for v in g), repr(float(o)),
                            repr(float(d))])

    @classmethod
    def read_csv(cls, path, width: int = 0, height: int = 0) -> "SequenceResult":
        pred, gt, frames = [], [], []
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "pred_cx" not in rows[0]:
            raise ValueError(f"{path}: missing result columns")
        for r in rows:
            frames.append(int(r["frame"]))
            pred.append(tuple(float(r[f"pred_{k}"]) for k in ("cx", "cy", "w", "h")))
            gt.append(tuple(float(r[f"gt_{k}"]) for k in ("cx", "cy", "w", "h")))
        return cls(pred, gt, width, height, frames)


@dataclass
class MetricSummary:
    auc: float
    pr: float
    success: dict[float, float]
    precision: dict[float, float]
    n_frames: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "pr": self.pr, "n_frames": self.n_frames,
                "success": {f"{k:.2f}": v for k, v in self.success.items()},
                "precision": {f"{k:g}": v for k, v in self.precision.items()}}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def compute_metrics(results: SequenceResult | Sequence[SequenceResult]) -> MetricSummary:
    """Success curve over 21 IoU thresholds (success: IoU >= threshold), AUC
    as its mean, and PR as the fraction of frames with center distance
    strictly below 20 px. Several sequences are pooled frame-wise."""
    if isinstance(results, SequenceResult):
        results = [results]
    ious = np.concatenate([r.ious for r in results]) if results else np.zeros(0)
    dist = np.concatenate([r.distances for r in results]) if results else np.zeros(0)
    if ious.size == 0:
        raise ValueError("no frames to evaluate")
    n = ious.size
    hits = [int(np.count_nonzero(ious >= t)) for t in THRESHOLDS]
    success = {float(t): h / n for t, h in zip(THRESHOLDS, hits)}
    precision = {float(r): int(np.count_nonzero(dist < r)) / n for r in range(51)}
    # mean of the success rates, from integer counts so it has a single rounding
    auc = sum(hits) / (n * len(THRESHOLDS))
    return MetricSummary(auc, int(np.count_nonzero(dist < PR_RADIUS_PX)) / n, success, precision, int(n))


# -- tracking harness --------------------------------------------------------

Predictor = Callable[[np.ndarray, np.ndarray, list], list]


def model_predictor(model: SDTrack, mode: str = "infer") -> Predictor:
    """Batch predictor: templates (T, B, 3, h, w), searches (T, B, 3, H, W)
    -> list of normalized boxes."""
    def predict(z, x, _context):
        return [r.box for r in model.predict(z, x, mode)]
    return predict


def oracle_predictor(gt_boxes: Sequence[Sequence[GroundTruthBox]]) -> Predictor:
    """Returns the true box in crop coordinates (harness plumbing check)."""
    def predict(_z, _x, context):
        return [win.to_crop(_box_tuple(gt_boxes[s][f])) for s, f, win in context]
    return predict


def _box_tuple(b) -> tuple[float, float, float, float]:
    if isinstance(b, GroundTruthBox):
        return (b.cx, b.cy, b.w, b.h)
    return tuple(float(v) for v in b)


def run_sequences(predictor: Predictor, images: Sequence[np.ndarray], first_boxes, *,
                  template_size: int, search_size: int, gt_boxes=None, names=None) -> list[SequenceResult]:
    """Track several sequences in lockstep, one batched forward per frame.

    ``images[s]`` holds raw event images (F, T, 3, H, W) of sequence s; the
    first frame's box initializes the template. Results cover frames 1..F-1.
    """
    n = len(images)
    if n == 0:
        return []
    F = images[0].shape[0]
    if any(im.shape[0] != F for im in images):
        raise ValueError("sequences must have equal frame counts for lockstep tracking")
    if F < 2:
        raise ValueError("need at least two frames")
    H, W = images[0].shape[-2:]
    first = [_box_tuple(b) for b in first_boxes]
    templates = []
    for im, box in zip(images, first):
        win = CropWindow.around(box, TEMPLATE_CONTEXT, template_size)
        templates.append(np.stack([crop(im[0, t] / 255.0, win) for t in range(im.shape[1])]))
    z = np.stack(templates, axis=1).astype(np.float32)  # (T, n, 3, h, w)
    prev = list(first)
    preds = [[] for _ in range(n)]
    for f in range(1, F):
        wins = [CropWindow.around(p, SEARCH_CONTEXT, search_size) for p in prev]
        x = np.stack([np.stack([crop(im[f, t] / 255.0, win) for t in range(im.shape[1])])
                      for im, win in zip(images, wins)], axis=1).astype(np.float32)
        boxes = predictor(z, x, [(s, f, wins[s]) for s in range(n)])
        for s in range(n):
            cx, cy, w, h = wins[s].to_pixels(boxes[s])
            # a collapsed size would shrink the next crop to nothing
            w, h = max(w, 1.0), max(h, 1.0)
            prev[s] = (cx, cy, w, h)
            preds[s].append(prev[s])
    out = []
    for s in range(n):
        gt = [_box_tuple(b) for b in gt_boxes[s][1:]] if gt_boxes is not None else list(preds[s])
        out.append(SequenceResult(preds[s], gt, W, H, list(range(1, F)), names[s] if names else ""))
    return out


def sequence_images(seq: SyntheticSequence, T: int = 1, method: str = "gtp", alpha: float = DEFAULT_ALPHA,
                    beta: float = DEFAULT_BETA) -> np.ndarray:
    scale = alpha if method == "event_frame" else 1.0
    return aggregate_sequence(seq.windows(T), T, method, alpha, beta, baseline_scale=scale)


def run_sequence(model: SDTrack | Predictor, images: np.ndarray, first_box, gt_boxes=None,
                 mode: str = "infer", template_size: int = 32, search_size: int = 64) -> SequenceResult:
    """Track one sequence of raw event images (F, T, 3, H, W). Crop sizes
    come from the model config, or from the arguments for a bare predictor."""
    if isinstance(model, SDTrack):
        cfg = model.config
        if images.shape[1] != cfg.T or images.shape[2] != 3:
            raise ValueError(f"event images {images.shape[1:3]} do not match model T={cfg.T} with 3 channels")
        predictor, sizes = model_predictor(model, mode), (cfg.template_size, cfg.search_size)
    else:
        predictor, sizes = model, (template_size, search_size)
    gts = [gt_boxes] if gt_boxes is not None else None
    return run_sequences(predictor, [images], [first_box], template_size=sizes[0], search_size=sizes[1],
                         gt_boxes=gts)[0]


def evaluate_model(model: SDTrack, sequences: Sequence[SyntheticSequence], method: str = "gtp",
                   alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                   mode: str = "infer") -> list[SequenceResult]:
    cfg = model.config
    images = [sequence_images(s, cfg.T, method, alpha, beta) for s in sequences]
    return run_sequences(model_predictor(model, mode), images, [s.boxes[0] for s in sequences],
                         template_size=cfg.template_size, search_size=cfg.search_size,
                         gt_boxes=[s.boxes for s in sequences])
