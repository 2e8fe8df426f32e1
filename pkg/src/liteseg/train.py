"""Desk-scale training: stepped poly LR, Nesterov SGD, multi-scale sampling,
a synthetic dataset, the training loop and a finite-difference gradient check."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import ops
from .graph import ModelGraph, backward, param_shapes, run
from .tensor import ShapeError

PUBLISHED_INITIAL_LR = {"darknet19": 1e-8, "mobilenetv2": 1e-7, "shufflenet": 1e-7}
TOY_INITIAL_LR = 1e-2


def poly_lr(initial: float, epoch: int, max_epochs: int, power: float = 0.9, step: int = 5) -> float:
    """initial * (1 - e/max_epochs)**power with e = epoch floored to a multiple of ``step``."""
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    stepped = (epoch // step) * step
    return initial * (1.0 - stepped / max_epochs) ** power


@dataclass
class OptimizerState:
    initial_lr: float = TOY_INITIAL_LR
    max_epochs: int = 300
    momentum: float = 0.9
    weight_decay: float = 4e-5
    power: float = 0.9
    lr_step_epochs: int = 5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.initial_lr < 0 or self.power <= 0:
            raise ValueError("need initial_lr >= 0 and power > 0")

    def lr(self, epoch: int) -> float:
        return poly_lr(self.initial_lr, epoch, self.max_epochs, self.power, self.lr_step_epochs)


def sgd_nesterov_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    no_decay: frozenset[str] = frozenset(),
) -> dict[str, np.ndarray]:
    """One Nesterov step; returns new parameters and updates ``state.velocity``.

    g' = g + wd*p;  v = m*v + g';  p = p - lr*(g' + m*v)
    Parameters without a gradient are passed through unchanged.
    """
    out = dict(params)
    m = state.momentum
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        wd = 0.0 if name in no_decay else state.weight_decay
        g = g + wd * p if wd else g
        v = state.velocity.get(name)
        v = g.copy() if v is None else m * v + g
        state.velocity[name] = v
        out[name] = (p - lr * (g + m * v)).astype(p.dtype, copy=False)
    return out


@dataclass(frozen=True)
class MultiScaleSpec:
    scales: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.scales:
            raise ValueError("scale set must not be empty")
        for h, w in self.scales:
            if h % 32 or w % 32 or h < 64 or w < 64:
                raise ValueError(f"scale {h}x{w} must be divisible by 32 and at least 64")


def multiscale_sampler(spec: MultiScaleSpec, rng_seed: int = 0) -> Iterator[tuple[int, int]]:
    rng = np.random.default_rng(rng_seed)
    while True:
        yield spec.scales[int(rng.integers(len(spec.scales)))]


def multiscale_sample(spec: MultiScaleSpec, rng_seed: int = 0) -> tuple[int, int]:
    return next(multiscale_sampler(spec, rng_seed))


# ------------------------------------------------------------------ data

CLASS_COLORS = np.array([[40, 40, 40], [200, 60, 50], [50, 90, 210]], dtype=np.float32) / 255.0


def synthetic_dataset(n: int = 4, size: int = 64, num_classes: int = 3, seed: int = 0, noise: float = 0.05):
    """Images of colored rectangles/discs on a background; class 0 is background.

    Returns (images (n,3,s,s) float32, labels (n,1,s,s) int64).
    """
    if num_classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes supported")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.zeros((n, 1, size, size), dtype=np.int64)
    for i in range(n):
        lab = np.zeros((size, size), dtype=np.int64)
        if num_classes > 1:
            h, w = rng.integers(size // 4, size // 2, size=2)
            y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
            lab[y0 : y0 + h, x0 : x0 + w] = 1
        if num_classes > 2:
            r = rng.integers(size // 8, size // 4)
            cy, cx = rng.integers(r, size - r, size=2)
            lab[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 2
        img = CLASS_COLORS[lab].transpose(2, 0, 1)
        images[i] = img + noise * rng.standard_normal(img.shape).astype(np.float32)
        labels[i, 0] = lab
    return images, labels


def resize_batch(images, labels, h, w):
    """Bilinear resize for images, nearest for labels (upscaling or identity only)."""
    if (h, w) == images.shape[2:]:
        return images, labels
    imgs = ops.bilinear_upsample(images, h, w)
    ys = (np.arange(h) * labels.shape[2]) // h
    xs = (np.arange(w) * labels.shape[3]) // w
    return imgs, labels[:, :, ys][:, :, :, xs]


# --------------------------------------------------------------- training


def trainable_names(g: ModelGraph) -> list[str]:
    return [name for name, (_, trainable) in param_shapes(g).items() if trainable]


def loss_and_grads(g: ModelGraph, weights, images, labels, ignore_index: int = 255):
    """Train-mode forward + backward.  Returns (loss, count, logits, grads, bn_updates)."""
    state = run(g, images, weights, mode="train", record=True)
    logits = state.values[g.taps["logits"]]
    ctx: dict = {}
    loss, count = ops.cross_entropy_loss(logits, labels, ignore_index, ctx)
    grads, _ = backward(g, state, {g.taps["logits"]: ops.loss_backward(ctx)})
    return loss, count, logits, grads, state.bn_updates


def pixel_accuracy(logits, labels, ignore_index: int = 255) -> float:
    pred = logits.argmax(axis=1)
    lab = labels[:, 0]
    valid = lab != ignore_index
    return float((pred[valid] == lab[valid]).mean()) if valid.any() else 0.0


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    pixel_acc: float


def train_toy(
    g: ModelGraph,
    weights: dict[str, np.ndarray],
    dataset,
    epochs: int,
    state: Optional[OptimizerState] = None,
    multiscale: Optional[MultiScaleSpec] = None,
    seed: int = 0,
    ignore_index: int = 255,
):
    """Full-batch training.  Returns (history, trained weights).

    Each epoch is one optimizer step on the whole dataset; ``loss`` and
    ``pixel_acc`` are measured on the train-mode forward of that step.
    """
    images, labels = dataset
    if images.shape[2] % 32 or images.shape[3] % 32:
        raise ShapeError(f"training images must have extents divisible by 32, got {images.shape[2:]}")
    state = state or OptimizerState(max_epochs=epochs)
    names = trainable_names(g)
    no_decay = frozenset(n for n in names if n.rsplit(".", 1)[1] in ("gamma", "beta"))
    sampler = multiscale_sampler(multiscale, seed) if multiscale else None
    weights = dict(weights)
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        lr = state.lr(min(epoch, state.max_epochs))
        x, y = images, labels
        if sampler is not None:
            x, y = resize_batch(images, labels, *next(sampler))
        loss, _, logits, grads, bn_updates = loss_and_grads(g, weights, x, y, ignore_index)
        history.append(EpochRecord(epoch, lr, loss, pixel_accuracy(logits, y, ignore_index)))
        weights = sgd_nesterov_step(weights, {k: grads[k] for k in names if k in grads}, state, lr, no_decay)
        weights.update(bn_updates)
    return history, weights


def history_csv(history: Sequence[EpochRecord]) -> str:
    lines = ["epoch,lr,loss,pixel_acc"]
    lines += [f"{r.epoch},{r.lr:.10g},{r.loss:.10g},{r.pixel_acc:.6f}" for r in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    entries: list[tuple[str, int, float, float, float]]  # name, flat index, analytic, numeric, rel err
    tolerance: float

    @property
    def worst(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and self.worst < self.tolerance

    @property
    def failures(self) -> list[str]:
        return [f"{n}[{i}]" for n, i, _, _, err in self.entries if err >= self.tolerance]


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _pixel_nll(logits, labels, ignore_index=255):
    ctx: dict = {}
    _, count = ops.cross_entropy_loss(logits, labels, ignore_index, ctx)
    lab, valid = ctx["lab"], ctx["valid"]
    picked = np.take_along_axis(ctx["logp"], np.where(valid, lab, 0)[:, None], axis=1)[:, 0]
    return np.where(valid, -picked, 0.0), max(count, 1)


def gradcheck_model(
    g: ModelGraph,
    weights: dict[str, np.ndarray],
    images: np.ndarray,
    labels: np.ndarray,
    samples: int = 20,
    seed: int = 0,
    rel_step: float = 1e-7,
    tolerance: float = 1e-3,
) -> GradCheckResult:
    """Compares backprop gradients of the training loss with central differences.

    Runs in float64 with train-mode batchnorm.  Parameters are drawn
    uniformly over all trainable scalars.  The step is small so that no
    activation kink is crossed; to keep roundoff below the signal the two
    perturbed losses are differenced pixel by pixel before averaging.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    w64 = {k: v.astype(np.float64) for k, v in weights.items()}
    x64 = images.astype(np.float64)
    _, _, _, grads, _ = loss_and_grads(g, w64, x64, labels)
    names = trainable_names(g)
    sizes = np.array([w64[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries = []

    def nll_at(name, idx, value):
        w = dict(w64)
        arr = w[name].copy()
        arr.flat[idx] = value
        w[name] = arr
        state = run(g, x64, w, mode="train")
        return _pixel_nll(state.values[g.taps["logits"]], labels)

    for f in sorted(flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[k], int(f - offsets[k])
        p = float(w64[name].flat[idx])
        h = rel_step * max(abs(p), 1.0)
        plus, count = nll_at(name, idx, p + h)
        minus, _ = nll_at(name, idx, p - h)
        numeric = float((plus - minus).sum() / count / (2 * h))
        analytic = float(grads[name].flat[idx]) if name in grads else 0.0
        entries.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return GradCheckResult(entries, tolerance)


def default_lr_for(backbone: str, published: bool = False) -> float:
    return PUBLISHED_INITIAL_LR[backbone] if published else TOY_INITIAL_LR

