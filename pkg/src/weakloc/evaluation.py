"""Localization and classification metrics for difference-map anomaly detection.

Localization is scored on diseased images only: the difference map
d = G_h(r) - r is compared with the signed ground truth, and both |d| and
|GT| are binarized with one scalar threshold, the mean of the per-image Otsu
thresholds of |GT| over the evaluated set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.stats import rankdata

from .data import Batch, DatasetHandle, make_batches

AUROC_MAX_PIXELS = 1_000_000
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SIGNED_MAP_RANGE = 4.0  # difference of two [-1, 1] images


class DegenerateLabels(ValueError):
    pass


class EmptySet(ValueError):
    pass


# ---------------------------------------------------------------------------
# elementary metrics
# ---------------------------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + P(tie) / 2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


def mse_stats(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float]:
    """Mean and population variance of per-image MSE over ``pairs``."""
    values = np.array([mse(a, b) for a, b in pairs])
    if values.size == 0:
        raise EmptySet("no image pairs")
    return float(values.mean()), float(values.var())


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, w, axis=0, mode="constant")
    out = ndimage.correlate1d(out, w, axis=1, mode="constant")
    r = len(w) // 2
    return out[r:-r, r:-r] if r else out


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = SIGNED_MAP_RANGE) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    w = _gaussian_window(min(SSIM_WINDOW, *[s - (1 - s % 2) for s in a.shape]))
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def otsu_threshold(values: np.ndarray, bins: int = 256) -> tuple[float, bool]:
    """Otsu cut over a ``bins``-bin histogram spanning [min, max].

    Returns (threshold, degenerate). Pixels ``>= threshold`` form the upper
    class. A constant input has no cut to optimize; its value is returned
    with ``degenerate=True``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return lo, True
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(counts)[:-1].astype(np.float64)  # cut k in 1..bins-1
    total = counts.sum()
    w1 = total - w0
    s0 = np.cumsum(counts * centers)[:-1]
    s1 = (counts * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - s1 / w1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    # first cut within rounding of the maximum, so float noise cannot reorder ties
    k = int(np.flatnonzero(between >= between.max() * (1 - 1e-12))[0]) + 1
    return float(edges[k]), False


def average_otsu_threshold(maps: Sequence[np.ndarray], bins: int = 256) -> tuple[float, list[int]]:
    """Mean of per-image Otsu thresholds of |map|; also returns degenerate image indices."""
    if len(maps) == 0:
        raise EmptySet("no ground-truth maps")
    thresholds, flagged = [], []
    for i, m in enumerate(maps):
        t, degenerate = otsu_threshold(np.abs(m), bins)
        thresholds.append(t)
        if degenerate:
            flagged.append(i)
    return float(np.mean(thresholds)), flagged


def cohen_kappa(y_true, y_pred) -> float:
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    classes = np.union1d(y_true, y_pred)
    cm = np.array([[np.sum((y_true == a) & (y_pred == b)) for b in classes] for a in classes], dtype=np.float64)
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / n**2
    if p_e == 1.0:
        raise DegenerateLabels("kappa undefined when a single class fills both marginals")
    return float((p_o - p_e) / (1 - p_e))


def classification_metrics(probs: np.ndarray, labels) -> tuple[float, float, float]:
    """(accuracy, Cohen's kappa, AUROC on the diseased-class probability).

    ``probs`` is (n, 2) with columns (h, p); ``labels`` are 0/1.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int).ravel()
    pred = probs.argmax(axis=1)
    acc = float(np.mean(pred == labels))
    return acc, cohen_kappa(labels, pred), auroc(probs[:, 1], labels)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    dice: float | None = None
    auroc_pix: float | None = None
    mse_d_gt: float | None = None
    mse_d_gt_var: float | None = None
    ssim: float | None = None
    mse_rh_ah: float | None = None
    mse_rh_ah_var: float | None = None
    accuracy_cls: float | None = None
    kappa: float | None = None
    auroc_image: float | None = None
    threshold: float | None = None
    n_images: int = 0
    degenerate_gt: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))

    def table_row(self, name: str = "model") -> str:
        def f(v, fmt):
            return "x" if v is None else format(v, fmt)

        return (
            f"{name} | Dice {f(self.dice, '.3f')} | AUROC_pix {f(self.auroc_pix, '.3f')} | "
            f"MSE(d,GT) {f(self.mse_d_gt, '.4f')} ({f(self.mse_d_gt_var, '.3f')}) | "
            f"SSIM {f(self.ssim, '.3f')} | MSE(r_h,a_h) {f(self.mse_rh_ah, '.4f')} ({f(self.mse_rh_ah_var, '.3f')}) | "
            f"Acc {f(self.accuracy_cls, '.3f')} | Kappa {f(self.kappa, '.3f')} | AUROC_img {f(self.auroc_image, '.3f')}"
        )


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------

def difference_map(generator, images: torch.Tensor) -> torch.Tensor:
    """d = G_h(r) - r, computed in eval mode without gradients."""
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        d = generator.translate(images, "h") - images
    generator.train(was_training)
    return d


def model_callables(generator, discriminator=None, device="cpu"):
    """Adapters from trained networks to the callables ``evaluate`` consumes."""

    def healthy(batch: Batch) -> torch.Tensor:
        generator.eval()
        with torch.no_grad():
            return generator.translate(batch.images.to(device), "h").cpu()

    def classify(batch: Batch) -> torch.Tensor:
        discriminator.eval()
        with torch.no_grad():
            return torch.softmax(discriminator.classify(batch.images.to(device)), dim=1).cpu()

    return healthy, (classify if discriminator is not None else None)


def evaluate(
    handle: DatasetHandle,
    translate_h: Callable[[Batch], torch.Tensor],
    classify: Callable[[Batch], torch.Tensor] | None = None,
    batch_size: int = 16,
    threshold: float | None = None,
    subsample_seed: int = 0,
    max_auroc_pixels: int = AUROC_MAX_PIXELS,
) -> MetricsReport:
    """Score a generator (and optionally a classifier) on ``handle``.

    ``translate_h`` maps a batch to its healthy translations a_h; ``classify``
    maps a batch to (n, 2) class probabilities.
    """
    report = MetricsReport(n_images=len(handle))
    d_maps, gt_maps, healthy_pairs = [], [], []
    probs, labels = [], []
    for batch in make_batches(handle, batch_size, balanced=False, with_gt=handle.has_gt):
        a_h = translate_h(batch).detach().cpu()
        r = batch.images
        for j in range(len(batch.indices)):
            img = r[j, 0].numpy()
            out = a_h[j, 0].numpy()
            if batch.labels[j] == 0:
                healthy_pairs.append((img, out))
            elif batch.gt is not None:
                d_maps.append(out - img)
                gt_maps.append(batch.gt[j, 0].numpy())
        if classify is not None:
            probs.append(classify(batch).detach().cpu().numpy())
            labels.append(batch.labels.numpy())

    if healthy_pairs:
        report.mse_rh_ah, report.mse_rh_ah_var = mse_stats(healthy_pairs)
    if d_maps:
        if threshold is None:
            threshold, report.degenerate_gt = average_otsu_threshold(gt_maps)
        report.threshold = threshold
        report.dice = float(np.mean([
            dice(np.abs(d) >= threshold, np.abs(g) >= threshold) for d, g in zip(d_maps, gt_maps)
        ]))
        report.mse_d_gt, report.mse_d_gt_var = mse_stats(zip(d_maps, gt_maps))
        report.ssim = float(np.mean([ssim(d, g) for d, g in zip(d_maps, gt_maps)]))
        scores = np.abs(np.stack(d_maps)).ravel()
        targets = (np.abs(np.stack(gt_maps)) >= threshold).ravel()
        if scores.size > max_auroc_pixels:
            pick = np.random.default_rng(subsample_seed).choice(scores.size, max_auroc_pixels, replace=False)
            scores, targets = scores[pick], targets[pick]
        if targets.any() and not targets.all():
            report.auroc_pix = auroc(scores, targets)
    if probs:
        p = np.concatenate(probs)
        y = np.concatenate(labels)
        if len(np.unique(y)) == 2:
            report.accuracy_cls, report.kappa, report.auroc_image = classification_metrics(p, y)
        else:
            report.accuracy_cls = float(np.mean(p.argmax(axis=1) == y))
    return report


def evaluate_models(generator, discriminator, handle: DatasetHandle, device="cpu", **kw) -> MetricsReport:
    healthy, classify = model_callables(generator, discriminator, device)
    return evaluate(handle, healthy, classify, **kw)
