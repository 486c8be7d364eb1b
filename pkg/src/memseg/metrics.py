"""Segmentation metrics (mAP, recall, mIoU, mAcc) and per-image -> per-scene
-> overall aggregation.

Undefined values are ``None`` in reports and ``NaN`` in per-class arrays.
Background (class 0) is excluded from recall and mAP, which score food
classes only; mIoU and mAcc include it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError, UndefinedMetricError
from .raster import MaskMap, ProbMap

METRICS = ("map", "recall", "miou", "macc")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def gt_size(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def union(self) -> np.ndarray:
        return self.tp + self.fp + self.fn


def confusion(pred: MaskMap, gt: MaskMap, n_classes: int | None = None) -> ConfusionCounts:
    if pred.data.shape != gt.data.shape:
        raise DimensionError(f"prediction {pred.data.shape} and ground truth {gt.data.shape} differ")
    p, g = pred.data.ravel(), gt.data.ravel()
    top = int(max(p.max(), g.max())) + 1
    n = top if n_classes is None else max(n_classes, top)
    hit = p == g
    tp = np.bincount(g[hit], minlength=n)
    pred_count = np.bincount(p, minlength=n)
    gt_count = np.bincount(g, minlength=n)
    return ConfusionCounts(tp, pred_count - tp, gt_count - tp)


def _select(values: np.ndarray, classes: Iterable[int] | None) -> np.ndarray:
    if classes is None:
        return values
    idx = [c for c in classes if c < len(values)]
    return values[idx]


def iou_per_class(counts: ConfusionCounts) -> np.ndarray:
    """IoU_c = TP / (TP + FP + FN); NaN where the union is empty."""
    union = counts.union
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, counts.tp / np.maximum(union, 1), np.nan)


def miou(counts: ConfusionCounts, classes: Iterable[int] | None = None) -> float:
    vals = _select(iou_per_class(counts), classes)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise UndefinedMetricError("no class present in prediction or ground truth")
    return math.fsum(vals) / vals.size


def acc_per_class(counts: ConfusionCounts) -> np.ndarray:
    """Acc_c = TP / |G_c|; NaN where the class has no ground-truth pixels."""
    size = counts.gt_size
    return np.where(size > 0, counts.tp / np.maximum(size, 1), np.nan)


def macc(counts: ConfusionCounts, classes: Iterable[int] | None = None) -> float:
    vals = _select(acc_per_class(counts), classes)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise UndefinedMetricError("no ground-truth pixels for any evaluated class")
    return math.fsum(vals) / vals.size


def food_classes(n_classes: int) -> list[int]:
    return list(range(1, n_classes))


def recall(counts: ConfusionCounts, classes: Iterable[int] | None = None) -> float:
    """Micro-averaged TP / (TP + FN) over food classes."""
    idx = food_classes(counts.n_classes) if classes is None else [c for c in classes if c < counts.n_classes]
    tp = int(counts.tp[idx].sum())
    fn = int(counts.fn[idx].sum())
    if tp + fn == 0:
        raise UndefinedMetricError("ground truth contains no food pixels")
    return tp / (tp + fn)


def average_precision(prob: ProbMap, gt: MaskMap, c: int) -> float:
    """All-point AP of the pixel ranking by probability of class ``c``;
    equal scores keep raster order."""
    if prob.data.shape[:2] != gt.data.shape:
        raise DimensionError("probability map and ground truth differ in size")
    positives = gt.data.ravel() == c
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise UndefinedMetricError(f"class {c} absent from ground truth")
    scores = prob.data[..., c].ravel() if c < prob.classes else np.zeros(positives.size)
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, hits.size + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / n_pos)


def binary_precision(pred: MaskMap, gt: MaskMap, c: int) -> float:
    """AP degenerate case for hard masks: precision of the class-c region."""
    if not (gt.data == c).any():
        raise UndefinedMetricError(f"class {c} absent from ground truth")
    predicted = pred.data == c
    n = int(predicted.sum())
    return 0.0 if n == 0 else int((predicted & (gt.data == c)).sum()) / n


def map_score(prob: ProbMap, gt: MaskMap, classes: Iterable[int] | None = None) -> float:
    """Mean AP over the evaluated classes that appear in the ground truth."""
    if classes is None:
        classes = food_classes(max(prob.classes, int(gt.data.max()) + 1))
    aps = []
    for c in classes:
        try:
            aps.append(average_precision(prob, gt, c))
        except UndefinedMetricError:
            continue
    if not aps:
        raise UndefinedMetricError("no evaluated class has ground-truth pixels")
    return math.fsum(aps) / len(aps)


def binary_map_score(pred: MaskMap, gt: MaskMap, classes: Iterable[int] | None = None) -> float:
    if classes is None:
        classes = food_classes(int(max(pred.data.max(), gt.data.max())) + 1)
    aps = []
    for c in classes:
        try:
            aps.append(binary_precision(pred, gt, c))
        except UndefinedMetricError:
            continue
    if not aps:
        raise UndefinedMetricError("no evaluated class has ground-truth pixels")
    return math.fsum(aps) / len(aps)


# --------------------------------------------------------------------------- per-image scores


@dataclass
class ImageScore:
    image_id: str
    scene: str = ""
    map: float | None = None
    recall: float | None = None
    miou: float | None = None
    macc: float | None = None

    def values(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}


def _defined(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def score_image(
    pred: MaskMap,
    gt: MaskMap,
    prob: ProbMap | None = None,
    image_id: str = "",
    scene: str = "",
    binary_ap: bool = False,
) -> ImageScore:
    """All four metrics for one image. Without a probability map the
    prediction is scored as a one-hot map, unless ``binary_ap`` asks for the
    precision form of AP."""
    counts = confusion(pred, gt)
    if binary_ap:
        ap = _defined(binary_map_score, pred, gt)
    else:
        if prob is None:
            prob = ProbMap.one_hot(pred, counts.n_classes)
        ap = _defined(map_score, prob, gt)
    return ImageScore(
        image_id,
        scene,
        map=ap,
        recall=_defined(recall, counts),
        miou=_defined(miou, counts),
        macc=_defined(macc, counts),
    )


# --------------------------------------------------------------------------- aggregation


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


@dataclass
class MetricReport:
    images: list[ImageScore]
    scenes: dict[str, dict[str, float | None]]
    overall: dict[str, float | None]
    classes: list[int] = field(default_factory=list)


def aggregate(scores: Mapping[str, Sequence[ImageScore]], classes: Sequence[int] = ()) -> MetricReport:
    """Scene value = mean of its images' defined values; overall = unweighted
    mean of the scene values."""
    if not scores or not any(scores.values()):
        raise EmptyInputError("nothing to aggregate")
    scenes = {}
    images = []
    for name in sorted(scores):
        items = list(scores[name])
        if not items:
            continue
        images.extend(items)
        scenes[name] = {m: _mean(getattr(s, m) for s in items) for m in METRICS}
    overall = {m: _mean(v[m] for v in scenes.values()) for m in METRICS}
    return MetricReport(images, scenes, overall, list(classes))


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.4f}"


def report_rows(report: MetricReport) -> list[list[str]]:
    rows = [["level", "id", *METRICS]]
    for s in report.images:
        ident = f"{s.scene}/{s.image_id}" if s.scene else s.image_id
        rows.append(["image", ident, *(_fmt(v) for v in s.values().values())])
    for name, vals in report.scenes.items():
        rows.append(["scene", name, *(_fmt(vals[m]) for m in METRICS)])
    rows.append(["overall", "", *(_fmt(report.overall[m]) for m in METRICS)])
    return rows


def emit_report(report: MetricReport, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(report_rows(report))
