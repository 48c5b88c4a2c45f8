"""Procedural benchmark of healthy and deformed ("diseased") scenes.

A scene holds two non-intersecting elliptical contours on top of two
concentric sine-wave backgrounds. Diseased images are produced by warping a
healthy rendering with the gradient of a Gaussian centred on the smaller
ellipse, which pulls that ellipse (and the background around it) inwards.
The ground truth is the signed difference healthy - diseased.

All geometry is expressed on a 256 x 256 reference grid with coordinates
0..255. Smaller output sizes are obtained by block-averaging the reference
rendering.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

REFERENCE_SIZE = 256
CENTER_RANGE = (50.0, 200.0)
DEFORMATION_SIGMA = 0.19  # normalized [0, 1] grid units
DEFAULT_PEAK_DISPLACEMENT = 10.0  # reference-grid pixels
DEFAULT_MAX_RESAMPLES = 100

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("relative_path", "label", "split", "scene_seed")


class RejectionBudgetExceeded(RuntimeError):
    """No non-intersecting ellipse pair was found within the resample budget."""


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple[float, float]  # (m1, m2) = (x, y)
    semi_axes: tuple[float, float]  # (a, b)
    rotation: float
    thickness: float


@dataclass(frozen=True)
class WaveSpec:
    origin: tuple[float, float]
    amplitude: float
    frequency: float


@dataclass(frozen=True)
class SceneSpec:
    e1: EllipseSpec
    e2: EllipseSpec
    c1: WaveSpec
    c2: WaveSpec
    seed: int | None = None


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: str
    gt: np.ndarray


@dataclass(frozen=True)
class ScenePriors:
    """Sampling distributions of one scene. Defaults follow the benchmark."""

    e1_axes_mean: tuple[float, float] = (40.0, 20.0)
    e2_axes_mean: tuple[float, float] = (70.0, 35.0)
    axes_std: float = 1.0
    thickness_mean: float = 5.0
    thickness_std: float = 0.7
    amplitude_range: tuple[float, float] = (0.2, 0.4)
    c1_frequency_range: tuple[float, float] = (0.2, 0.35)
    c2_frequency_range: tuple[float, float] = (0.35, 0.5)
    center_range: tuple[float, float] = CENTER_RANGE


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _sample_ellipse(rng: np.random.Generator, axes_mean, priors: ScenePriors) -> EllipseSpec:
    m = rng.uniform(*priors.center_range, size=2)
    a = rng.normal(axes_mean[0], priors.axes_std)
    b = rng.normal(axes_mean[1], priors.axes_std)
    phi = rng.uniform(0.0, 2 * math.pi)
    g = rng.normal(priors.thickness_mean, priors.thickness_std)
    # the thickness prior has ~7 sigma of headroom; keep it physical anyway
    g = max(g, 0.5)
    return EllipseSpec((float(m[0]), float(m[1])), (float(a), float(b)), float(phi), float(g))


def _sample_wave(rng: np.random.Generator, freq_range, priors: ScenePriors, origin=None) -> WaveSpec:
    if origin is None:
        o = rng.uniform(*priors.center_range, size=2)
        origin = (float(o[0]), float(o[1]))
    h = rng.uniform(*priors.amplitude_range)
    f = rng.uniform(*freq_range)
    return WaveSpec(origin, float(h), float(f))


def sample_scene(
    rng: np.random.Generator | int,
    priors: ScenePriors | None = None,
    max_resamples: int = DEFAULT_MAX_RESAMPLES,
) -> SceneSpec:
    """Draw one scene whose two ellipses do not overlap.

    ``rng`` may be a numpy Generator or an integer seed; with an integer the
    seed is recorded on the returned spec. Intersecting draws are discarded
    and the whole scene is redrawn, at most ``max_resamples`` times.
    """
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    priors = priors or ScenePriors()
    for _ in range(max_resamples + 1):
        e1 = _sample_ellipse(rng, priors.e1_axes_mean, priors)
        e2 = _sample_ellipse(rng, priors.e2_axes_mean, priors)
        c1 = _sample_wave(rng, priors.c1_frequency_range, priors)
        c2 = _sample_wave(rng, priors.c2_frequency_range, priors, origin=e2.center)
        if not ellipses_overlap(e1, e2):
            return SceneSpec(e1, e2, c1, c2, seed)
    raise RejectionBudgetExceeded(
        f"no non-intersecting ellipse pair after {max_resamples} resamples"
    )


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _grid(size: int = REFERENCE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _ellipse_quadratic(e: EllipseSpec, xs, ys, da: float = 0.0):
    """(u/(a+da))^2 + (v/(b+da))^2 in the ellipse's rotated frame."""
    dx = xs - e.center[0]
    dy = ys - e.center[1]
    c, s = math.cos(e.rotation), math.sin(e.rotation)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / (e.semi_axes[0] + da)) ** 2 + (v / (e.semi_axes[1] + da)) ** 2


def ellipse_contour_mask(e: EllipseSpec, size: int = REFERENCE_SIZE) -> np.ndarray:
    """Hard mask of the contour band of width ``thickness`` around the ellipse."""
    xs, ys = _grid(size)
    half = e.thickness / 2
    inside_outer = _ellipse_quadratic(e, xs, ys, half) <= 1.0
    inside_inner = _ellipse_quadratic(e, xs, ys, -min(half, 0.999 * min(e.semi_axes))) < 1.0
    return inside_outer & ~inside_inner


def ellipse_filled_mask(e: EllipseSpec, size: int = REFERENCE_SIZE) -> np.ndarray:
    """Contour band plus interior."""
    xs, ys = _grid(size)
    return _ellipse_quadratic(e, xs, ys, e.thickness / 2) <= 1.0


def ellipses_overlap(e1: EllipseSpec, e2: EllipseSpec, size: int = REFERENCE_SIZE) -> bool:
    return bool(np.any(ellipse_filled_mask(e1, size) & ellipse_filled_mask(e2, size)))


def wave_field(w: WaveSpec, size: int = REFERENCE_SIZE) -> np.ndarray:
    """sin(t * f) * h with t the distance to the wave origin."""
    xs, ys = _grid(size)
    t = np.hypot(xs - w.origin[0], ys - w.origin[1])
    return np.sin(t * w.frequency) * w.amplitude


def _check_size(size) -> int:
    h, w = (size, size) if isinstance(size, int) else size
    if h != w or REFERENCE_SIZE % h:
        raise ValueError(f"size must be square and divide {REFERENCE_SIZE}, got {size}")
    return h


def downsample(img: np.ndarray, size: int) -> np.ndarray:
    """Block-average a reference-grid image down to ``size``."""
    k = img.shape[0] // size
    if k == 1:
        return img
    return img.reshape(size, k, size, k).mean(axis=(1, 3))


def render_reference(scene: SceneSpec) -> np.ndarray:
    """Healthy rendering on the 256 x 256 reference grid, in [-1, 1]."""
    img = wave_field(scene.c1) + wave_field(scene.c2)
    contour = ellipse_contour_mask(scene.e1) | ellipse_contour_mask(scene.e2)
    img[contour] = 1.0
    lo, hi = img.min(), img.max()
    return 2.0 * (img - lo) / (hi - lo) - 1.0


def render_healthy(scene: SceneSpec, size=(REFERENCE_SIZE, REFERENCE_SIZE)) -> np.ndarray:
    n = _check_size(size)
    return downsample(render_reference(scene), n).astype(np.float32)


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------

def gaussian_gradient(
    scene: SceneSpec,
    xs: np.ndarray,
    ys: np.ndarray,
    peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form displacement at arbitrary reference-grid points.

    The gradient of an isotropic Gaussian centred on e1, scaled so its
    largest magnitude (reached at radius sigma) equals ``peak_displacement``.
    It points towards the centre.
    """
    sigma = DEFORMATION_SIGMA * (REFERENCE_SIZE - 1)
    cx, cy = scene.e1.center
    dx = np.asarray(xs, dtype=np.float64) - cx
    dy = np.asarray(ys, dtype=np.float64) - cy
    scale = peak_displacement * math.exp(0.5) / sigma
    g = np.exp(-(dx**2 + dy**2) / (2 * sigma**2))
    return -scale * dx * g, -scale * dy * g


def gaussian_potential(scene: SceneSpec, peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT) -> np.ndarray:
    sigma = DEFORMATION_SIGMA * (REFERENCE_SIZE - 1)
    xs, ys = _grid()
    cx, cy = scene.e1.center
    amp = peak_displacement * math.exp(0.5) * sigma
    return amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def deformation_field(
    scene: SceneSpec,
    size=(REFERENCE_SIZE, REFERENCE_SIZE),
    peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT,
) -> np.ndarray:
    """Displacement field (2, H, W) as (dx, dy) in reference-grid pixels.

    Computed as the central-difference gradient of the sampled potential so
    that the discrete curl vanishes to rounding error.
    """
    n = _check_size(size)
    phi = gaussian_potential(scene, peak_displacement)
    fy, fx = np.gradient(phi)
    field = np.stack([fx, fy])
    if n != REFERENCE_SIZE:
        k = REFERENCE_SIZE // n
        field = np.stack([downsample(c, n) for c in field]) / k
    return field


def discrete_curl(field: np.ndarray) -> np.ndarray:
    """d(fx)/dy - d(fy)/dx by central differences on the interior."""
    fx, fy = field
    dfx_dy = (fx[2:, 1:-1] - fx[:-2, 1:-1]) / 2
    dfy_dx = (fy[1:-1, 2:] - fy[1:-1, :-2]) / 2
    return dfx_dy - dfy_dx


def apply_deformation(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward warp: out(x) = image(x - field(x)), bilinear, border clamped."""
    h, w = image.shape
    if field.shape != (2, h, w):
        raise ValueError(f"field shape {field.shape} does not match image {image.shape}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([ys - field[1], xs - field[0]])
    out = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest")
    return out.astype(image.dtype)


def render_diseased(
    scene: SceneSpec,
    size=(REFERENCE_SIZE, REFERENCE_SIZE),
    peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT,
) -> np.ndarray:
    n = _check_size(size)
    ref = render_reference(scene)
    warped = apply_deformation(ref, deformation_field(scene, peak_displacement=peak_displacement))
    return downsample(warped, n).astype(np.float32)


def make_sample(
    scene: SceneSpec,
    label: str,
    size=(REFERENCE_SIZE, REFERENCE_SIZE),
    peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT,
) -> SyntheticSample:
    healthy = render_healthy(scene, size)
    if label == "h":
        return SyntheticSample(healthy, "h", np.zeros_like(healthy))
    if label != "p":
        raise ValueError(f"label must be 'h' or 'p', got {label!r}")
    diseased = render_diseased(scene, size, peak_displacement)
    return SyntheticSample(diseased, "p", healthy - diseased)


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def scene_seed(master_seed: int, index: int) -> int:
    """Child seed of scene ``index``; independent of worker layout."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def write_float_image(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.float32), mode="F").save(path, format="TIFF")


def read_float_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im, dtype=np.float32)


@dataclass
class Manifest:
    root: Path
    rows: list[dict]

    def counts(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for r in self.rows:
            key = (r["split"], r["label"])
            out[key] = out.get(key, 0) + 1
        return out

    @property
    def path(self) -> Path:
        return self.root / "manifest.csv"


def gt_relative_path(split: str, index: str) -> str:
    return f"gt/{split}/{index}.tiff"


def generate_dataset(
    n_train_per_class: int,
    n_val_per_class: int,
    n_test_per_class: int,
    seed: int,
    out_dir,
    size: int = REFERENCE_SIZE,
    peak_displacement: float = DEFAULT_PEAK_DISPLACEMENT,
    workers: int = 1,
) -> Manifest:
    """Write images, diseased ground truth and ``manifest.csv`` under ``out_dir``.

    Every scene index is rendered once, either healthy or diseased, so the two
    classes never share a scene.
    """
    out = Path(out_dir)
    _check_size(size)
    jobs = []
    index = 0
    for split, n in zip(SPLITS, (n_train_per_class, n_val_per_class, n_test_per_class)):
        for label in ("h", "p"):
            for _ in range(n):
                jobs.append((split, label, index))
                index += 1
    width = max(6, len(str(index)))

    def render(job):
        split, label, idx = job
        s = scene_seed(seed, idx)
        sample = make_sample(sample_scene(s), label, (size, size), peak_displacement)
        name = f"{idx:0{width}d}"
        rel = f"images/{split}/{label}/{name}.tiff"
        write_float_image(out / rel, sample.image)
        if label == "p":
            write_float_image(out / gt_relative_path(split, name), sample.gt)
        return {"relative_path": rel, "label": label, "split": split, "scene_seed": s}

    out.mkdir(parents=True, exist_ok=True)
    if workers > 1 and jobs:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(render, jobs))
    else:
        rows = [render(j) for j in jobs]

    tmp = out / "manifest.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, out / "manifest.csv")
    return Manifest(out, rows)


def scene_to_dict(scene: SceneSpec) -> dict:
    return asdict(scene)
