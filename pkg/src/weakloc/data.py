"""Loading labeled image sets and turning them into batches."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import synthetic

HEALTHY, DISEASED = "h", "p"
LABELS = (HEALTHY, DISEASED)
LABEL_INDEX = {HEALTHY: 0, DISEASED: 1}

# class sizes of the chest X-ray training split (pleural effusion vs healthy)
CHEXPERT_TRAIN_COUNTS = {HEALTHY: 14179, DISEASED: 16776}
CHEXPERT_EVAL_COUNTS = {HEALTHY: 200, DISEASED: 200}


class ManifestError(ValueError):
    pass


class MissingFile(FileNotFoundError):
    pass


class DecodeError(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def complement(label: str) -> str:
    """The other class: h <-> p."""
    if label == HEALTHY:
        return DISEASED
    if label == DISEASED:
        return HEALTHY
    raise ValueError(f"unknown label {label!r}")


def normalize(arr: np.ndarray) -> np.ndarray:
    """Map the container's value range affinely onto [-1, 1].

    Float data is assumed to be stored already in [-1, 1] and passes through
    unchanged. The map depends on the dtype only, never on the image content.
    """
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 127.5 - 1.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 32767.5 - 1.0
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    raise DecodeError(f"unsupported pixel type {arr.dtype}")


@dataclass
class Sample:
    path: Path
    label: str
    gt_path: Path | None = None


@dataclass
class DatasetHandle:
    """Indexed, lazily decoded image set.

    ``resize_to`` is applied at decode time; ``None`` keeps the stored size.
    """

    samples: list[Sample]
    split: str
    resize_to: tuple[int, int] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {HEALTHY: 0, DISEASED: 0}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    @property
    def has_gt(self) -> bool:
        return any(s.gt_path is not None for s in self.samples)

    def indices(self, label: str) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.label == label]

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = load_image(self.samples[i].path, self.resize_to)
        return self._cache[i]

    def gt(self, i: int) -> np.ndarray | None:
        s = self.samples[i]
        if s.gt_path is None:
            return None
        return synthetic.read_float_image(s.gt_path)

    def __getitem__(self, i: int):
        return self.image(i), self.samples[i].label, self.gt(i)

    def subset(self, idx: Sequence[int]) -> "DatasetHandle":
        return DatasetHandle([self.samples[i] for i in idx], self.split, self.resize_to)


def load_image(path: Path, resize_to=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "RGBA", "P", "LA", "CMYK", "YCbCr"):
                im = im.convert("L")  # ITU-R 601 luminance
            arr = np.array(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.dtype == np.int32:  # PIL mode "I" for 16-bit PNGs
        arr = arr.astype(np.uint16)
    img = normalize(arr)
    if resize_to is not None and img.shape != tuple(resize_to):
        h, w = resize_to
        img = np.array(Image.fromarray(img, mode="F").resize((w, h), Image.BILINEAR), dtype=np.float32)
    return img


def load_synthetic(manifest_path, split: str) -> DatasetHandle:
    """Index the rows of one split of a generated benchmark."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(str(manifest_path))
    root = manifest_path.parent
    samples = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(synthetic.MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"manifest lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"]
            if label not in LABELS:
                raise ManifestError(f"line {lineno}: label {label!r} not in {LABELS}")
            if row["split"] not in synthetic.SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {row['split']!r}")
            if row["split"] != split:
                continue
            path = root / row["relative_path"]
            if not path.exists():
                raise MissingFile(str(path))
            gt_path = None
            if label == DISEASED:
                gt_path = root / synthetic.gt_relative_path(split, Path(row["relative_path"]).stem)
                if not gt_path.exists():
                    raise MissingFile(str(gt_path))
            samples.append(Sample(path, label, gt_path))
    return DatasetHandle(samples, split)


def load_external(root_dir, label_table_path, resize_to=(256, 256), split: str = "test") -> DatasetHandle:
    """Index an image folder described by a ``path,label`` table (0 healthy, 1 diseased).

    Every image is decoded once up front so corrupt files surface here.
    """
    root = Path(root_dir)
    table = Path(label_table_path)
    if not table.exists():
        raise MissingFile(str(table))
    samples = []
    with open(table, newline="") as fh:
        reader = csv.DictReader(fh)
        if not {"path", "label"} <= set(reader.fieldnames or []):
            raise ManifestError("label table needs 'path' and 'label' columns")
        for lineno, row in enumerate(reader, start=2):
            try:
                value = int(float(row["label"]))
            except ValueError:
                raise ManifestError(f"line {lineno}: bad label {row['label']!r}") from None
            if value not in (0, 1):
                raise ManifestError(f"line {lineno}: label must be 0 or 1, got {value}")
            samples.append(Sample(root / row["path"], LABELS[value]))
    handle = DatasetHandle(samples, split, tuple(resize_to) if resize_to else None)
    for i in range(len(handle)):
        handle.image(i)
    return handle


@dataclass
class Batch:
    images: torch.Tensor  # (n, 1, H, W) in [-1, 1]
    labels: torch.Tensor  # (n,) long, 0 = h, 1 = p
    indices: list[int]
    gt: torch.Tensor | None = None


def _collate(handle: DatasetHandle, idx: list[int], with_gt: bool) -> Batch:
    images = torch.from_numpy(np.stack([handle.image(i) for i in idx]))[:, None]
    labels = torch.tensor([LABEL_INDEX[handle.samples[i].label] for i in idx], dtype=torch.long)
    gt = None
    if with_gt:
        maps = [handle.gt(i) for i in idx]
        maps = [np.zeros_like(handle.image(i)) if m is None else m for i, m in zip(idx, maps)]
        gt = torch.from_numpy(np.stack(maps))[:, None]
    return Batch(images, labels, list(idx), gt)


def make_batches(
    handle: DatasetHandle,
    batch_size: int,
    shuffle_seed: int | None = None,
    balanced: bool = True,
    with_gt: bool = False,
) -> Iterator[Batch]:
    """Yield batches from ``handle``.

    Balanced (training) mode shuffles each class with ``shuffle_seed`` and
    pairs ``batch_size // 2`` images of each; leftovers of the larger class
    are dropped. Unbalanced (evaluation) mode keeps file order.
    """
    if len(handle) == 0:
        raise EmptyDataset("dataset has no samples")
    if balanced:
        if batch_size < 2 or batch_size % 2:
            raise ValueError(f"balanced batches need an even batch_size >= 2, got {batch_size}")
        rng = np.random.default_rng(shuffle_seed)
        half = batch_size // 2
        h_idx = rng.permutation(handle.indices(HEALTHY))
        p_idx = rng.permutation(handle.indices(DISEASED))
        n = min(len(h_idx), len(p_idx)) // half
        if n == 0:
            raise EmptyDataset("not enough samples of both classes for one balanced batch")
        for b in range(n):
            idx = [int(i) for i in h_idx[b * half:(b + 1) * half]] + [int(i) for i in p_idx[b * half:(b + 1) * half]]
            yield _collate(handle, idx, with_gt)
    else:
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        for start in range(0, len(handle), batch_size):
            yield _collate(handle, list(range(start, min(start + batch_size, len(handle)))), with_gt)
