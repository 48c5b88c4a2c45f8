"""Slow, obviously-correct reference implementations used by the tests."""
import itertools
import math

import numpy as np


def auroc_all_pairs(scores, labels):
    scores = list(map(float, scores))
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for a, b in itertools.product(pos, neg):
        if a > b:
            wins += 1.0
        elif a == b:
            wins += 0.5
    return wins / (len(pos) * len(neg))


def dice_count(a, b):
    a = [bool(x) for x in np.ravel(a)]
    b = [bool(x) for x in np.ravel(b)]
    inter = sum(1 for x, y in zip(a, b) if x and y)
    size = sum(a) + sum(b)
    return 1.0 if size == 0 else 2 * inter / size


def kappa_confusion(y_true, y_pred):
    """Two-class Cohen's kappa from an explicitly tallied confusion matrix."""
    cm = [[0, 0], [0, 0]]
    for t, p in zip(y_true, y_pred):
        cm[int(t)][int(p)] += 1
    n = sum(map(sum, cm))
    p_o = (cm[0][0] + cm[1][1]) / n
    rows = [cm[0][0] + cm[0][1], cm[1][0] + cm[1][1]]
    cols = [cm[0][0] + cm[1][0], cm[0][1] + cm[1][1]]
    p_e = (rows[0] * cols[0] + rows[1] * cols[1]) / n**2
    return (p_o - p_e) / (1 - p_e)


def otsu_exhaustive(values, bins=256):
    """Try every cut of the histogram and compute between-class variance directly."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    best, best_k = -1.0, None
    for k in range(1, bins):
        n0 = counts[:k].sum()
        n1 = counts[k:].sum()
        if n0 == 0 or n1 == 0:
            continue
        m0 = (counts[:k] * centers[:k]).sum() / n0
        m1 = (counts[k:] * centers[k:]).sum() / n1
        w0 = n0 / counts.sum()
        w1 = n1 / counts.sum()
        var = w0 * w1 * (m1 - m0) ** 2
        if var > best * (1 + 1e-12) + 1e-300:
            best, best_k = var, k
    return edges[best_k]


def mse_loop(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)


def ellipse_rows(center, axes, rotation, thickness, size=256):
    """Scanline rasterization of an ellipse contour's outer boundary.

    For each row y the quadratic form q11 dx^2 + 2 q12 dx dy + q22 dy^2 <= 1
    is solved for dx, giving the inclusive pixel interval {y: (x_lo, x_hi)}.
    """
    a = axes[0] + thickness / 2
    b = axes[1] + thickness / 2
    c, s = math.cos(rotation), math.sin(rotation)
    q11 = c * c / a**2 + s * s / b**2
    q22 = s * s / a**2 + c * c / b**2
    q12 = c * s * (1 / a**2 - 1 / b**2)
    rows = {}
    for y in range(size):
        dy = y - center[1]
        disc = (q12 * dy) ** 2 - q11 * (q22 * dy * dy - 1)
        if disc < 0:
            continue
        root = math.sqrt(disc)
        lo = center[0] + (-q12 * dy - root) / q11
        hi = center[0] + (-q12 * dy + root) / q11
        x_lo, x_hi = max(0, math.ceil(lo)), min(size - 1, math.floor(hi))
        if x_lo <= x_hi:
            rows[y] = (x_lo, x_hi)
    return rows


def rows_disjoint(r1, r2):
    for y, (a0, a1) in r1.items():
        if y in r2:
            b0, b1 = r2[y]
            if a0 <= b1 and b0 <= a1:
                return False
    return True
