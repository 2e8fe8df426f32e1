"""Segmentation metrics (confusion matrix, IOU) and the inference benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np

from .graph import ModelGraph, forward
from .ops import InvalidLabelError
from .tensor import DTYPE, ShapeError, reflect_pad_to_multiple, shape4

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
CITYSCAPES_CATEGORIES = ("flat", "construction", "object", "nature", "sky", "human", "vehicle")
# class id -> category id
CITYSCAPES_CATEGORY_MAP = (0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 5, 6, 6, 6, 6, 6, 6)


@dataclass
class ConfusionMatrix:
    """Pixel tally; rows are ground truth, columns are predictions."""

    num_classes: int
    ignore_index: int = 255
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        elif self.counts.shape != (self.num_classes, self.num_classes):
            raise ShapeError(f"counts must be {self.num_classes}x{self.num_classes}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, prediction, truth) -> "ConfusionMatrix":
        return confusion_update(self, prediction, truth)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts.copy())


def confusion_update(cm: ConfusionMatrix, prediction, truth) -> ConfusionMatrix:
    """Adds the per-pixel tally of ``(truth, prediction)`` to ``cm`` in place."""
    pred = np.asarray(prediction)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {true.shape} differ in extent")
    k = cm.num_classes
    keep = true != cm.ignore_index
    t, p = true[keep].astype(np.int64), pred[keep].astype(np.int64)
    for name, v in (("truth", t), ("prediction", p)):
        bad = (v < 0) | (v >= k)
        if bad.any():
            raise InvalidLabelError(f"{name} label {int(v[bad][0])} outside [0, {k})")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


def _present(counts):
    return (counts.sum(axis=0) + counts.sum(axis=1)) > 0


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """tp / (tp + fp + fn) per class; NaN for classes absent from truth and prediction."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(cm: ConfusionMatrix, exact: bool = False):
    """Mean IOU over classes that occur in truth or prediction.

    With ``exact`` the result is a ``Fraction`` computed from the integer tallies.
    """
    c = cm.counts
    present = np.flatnonzero(_present(c))
    if present.size == 0:
        raise ValueError("confusion matrix is empty")
    if exact:
        cols, rows = c.sum(axis=0), c.sum(axis=1)
        ious = [Fraction(int(c[i, i]), int(rows[i] + cols[i] - c[i, i])) for i in present]
        return sum(ious, Fraction(0)) / len(ious)
    return float(np.mean(per_class_iou(cm)[present]))


def collapse(cm: ConfusionMatrix, mapping: Sequence[int]) -> ConfusionMatrix:
    """Merges classes into categories; ``mapping[class] = category``."""
    m = np.asarray(mapping, dtype=np.int64)
    if m.shape != (cm.num_classes,) or m.min() < 0:
        raise ValueError(f"mapping must assign a category to each of {cm.num_classes} classes")
    k = int(m.max()) + 1
    onehot = np.zeros((cm.num_classes, k), dtype=np.int64)
    onehot[np.arange(cm.num_classes), m] = 1
    return ConfusionMatrix(k, cm.ignore_index, onehot.T @ cm.counts @ onehot)


def category_miou(cm: ConfusionMatrix, mapping: Sequence[int] = CITYSCAPES_CATEGORY_MAP, exact: bool = False):
    return miou(collapse(cm, mapping), exact=exact)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / max(cm.total, 1))


def format_iou_table(cm: ConfusionMatrix, names: Optional[Sequence[str]] = None) -> str:
    names = names or [str(i) for i in range(cm.num_classes)]
    width = max(len(n) for n in names)
    rows = [f"{n:<{width}}  {iou:7.4f}" for n, iou in zip(names, per_class_iou(cm))]
    rows.append(f"{'mIOU':<{width}}  {miou(cm):7.4f}")
    return "\n".join(rows)


# ------------------------------------------------------------- benchmark


@dataclass
class BenchmarkReport:
    label: str
    input_hw: tuple[int, int]
    padded_hw: tuple[int, int]
    burn_in: int
    latencies: np.ndarray  # seconds per timed run

    @property
    def mean_fps(self) -> float:
        return float(1.0 / self.latencies.mean())

    def percentile_ms(self, q: float) -> float:
        return float(np.percentile(self.latencies, q) * 1e3)

    @property
    def p50_ms(self) -> float:
        return self.percentile_ms(50)

    @property
    def p95_ms(self) -> float:
        return self.percentile_ms(95)


def benchmark_fps(
    g: ModelGraph,
    weights: Mapping[str, np.ndarray],
    shape,
    burn_in: int = 200,
    runs: int = 200,
    pool: int = 4,
    seed: int = 0,
    label: str = "",
    progress=None,
) -> BenchmarkReport:
    """Times eval-mode forward passes after ``burn_in`` untimed ones.

    Inputs are drawn from a pool of ``pool`` pre-generated tensors.  Inputs
    whose extents are not multiples of 32 are reflect-padded; the padding is
    inside the timed region.
    """
    s = shape4(shape)
    if runs < 1 or burn_in < 0:
        raise ValueError("need runs >= 1 and burn_in >= 0")
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal(s).astype(DTYPE) for _ in range(max(pool, 1))]
    padded_hw = reflect_pad_to_multiple(inputs[0]).shape[2:]
    lat = np.empty(runs)
    for i in range(burn_in + runs):
        x = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        forward(g, reflect_pad_to_multiple(x), weights)
        dt = time.perf_counter() - t0
        if i >= burn_in:
            lat[i - burn_in] = dt
        if progress is not None:
            progress(i, burn_in + runs)
    return BenchmarkReport(label or g.name, (s.h, s.w), tuple(padded_hw), burn_in, lat)


def format_benchmark(reports: Sequence[BenchmarkReport]) -> str:
    head = f"{'model':<24} {'input':>10} {'padded':>10} {'runs':>5} {'FPS':>9} {'p50 ms':>9} {'p95 ms':>9}"
    lines = [head]
    for r in reports:
        lines.append(
            f"{r.label:<24} {'%dx%d' % r.input_hw[::-1]:>10} {'%dx%d' % r.padded_hw[::-1]:>10} "
            f"{len(r.latencies):>5} {r.mean_fps:>9.3f} {r.p50_ms:>9.2f} {r.p95_ms:>9.2f}"
        )
    return "\n".join(lines)


def benchmark_csv(reports: Sequence[BenchmarkReport]) -> str:
    lines = ["model,width,height,padded_width,padded_height,burn_in,runs,mean_fps,p50_ms,p95_ms"]
    for r in reports:
        lines.append(
            f"{r.label},{r.input_hw[1]},{r.input_hw[0]},{r.padded_hw[1]},{r.padded_hw[0]},"
            f"{r.burn_in},{len(r.latencies)},{r.mean_fps:.6g},{r.p50_ms:.6g},{r.p95_ms:.6g}"
        )
    return "\n".join(lines) + "\n"
