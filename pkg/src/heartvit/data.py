"""Datasets: deterministic synthetic blobs and a directory format.

Directory layout: ``index.tsv`` with ``label<TAB>relative-path`` lines, each
path naming a file that holds one tensor record in the checkpoint record
layout (see :mod:`heartvit.checkpoint`).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .checkpoint import atomic_write_bytes, read_record, write_record
from .errors import DataError, FormatError


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"
    classes: int = 8
    samples_per_class: int = 64
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    path: str | None = None
    noise: float = 0.35
    shift_step: int = 8
    jitter: int = 1
    distractors: int = 1
    illumination: float = 0.1


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, S, S)
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified split; the first part receives ``fraction`` of each class."""
        rng = make_rng(seed)
        first, second = [], []
        for c in np.unique(self.labels):
            idx = np.nonzero(self.labels == c)[0]
            idx = idx[rng.permutation(len(idx))]
            k = int(round(fraction * len(idx)))
            first.append(idx[:k])
            second.append(idx[k:])
        a, b = np.sort(np.concatenate(first)), np.sort(np.concatenate(second))
        return self.subset(a), self.subset(b)


def _class_templates(spec: DatasetSpec, rng):
    """Per class: blob centres, widths and colours (3 blobs each)."""
    S = spec.image_size
    out = []
    for _ in range(spec.classes):
        centres = rng.uniform(0.2 * S, 0.8 * S, size=(3, 2))
        widths = rng.uniform(0.06 * S, 0.12 * S, size=3)
        colours = rng.uniform(-1.0, 1.0, size=(3, spec.channels))
        out.append((centres, widths, colours))
    return out


def _render(S, centres, widths, colours, gains):
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    img = np.zeros((colours.shape[1], S, S))
    for (cy, cx), w, col, g in zip(centres, widths, colours, gains):
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        img += g * col[:, None, None] * blob[None]
    return img


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Class-conditional Gaussian-blob images with jitter, distractors and noise.

    Each class owns a fixed constellation of three coloured blobs.  Every
    sample rescales each blob, adds one distractor blob, shifts the image
    cyclically and adds pixel noise.  Samples are ordered class by class.
    """
    if spec.source != "synthetic":
        raise DataError("generate_synthetic needs a synthetic DatasetSpec")
    rng = make_rng(spec.seed)
    S = spec.image_size
    templates = _class_templates(spec, rng)
    images, labels = [], []
    for c, (centres, widths, colours) in enumerate(templates):
        for _ in range(spec.samples_per_class):
            gains = rng.uniform(0.6, 1.4, size=3)
            img = _render(S, centres, widths, colours, gains)
            k = spec.distractors
            dc = rng.uniform(0, S, size=(k, 2))
            dw = rng.uniform(0.06 * S, 0.12 * S, size=k)
            dcol = rng.uniform(-1.0, 1.0, size=(k, spec.channels))
            img += _render(S, dc, dw, dcol, np.ones(k))
            grid = spec.image_size // spec.shift_step
            shift = spec.shift_step * rng.integers(0, grid, size=2) + rng.integers(-spec.jitter, spec.jitter + 1, size=2)
            img = np.roll(img, tuple(shift), axis=(1, 2))
            img += rng.uniform(-spec.illumination, spec.illumination, size=(spec.channels, 1, 1))
            img += spec.noise * rng.standard_normal(img.shape)
            images.append(img)
            labels.append(c)
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64))


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic":
        return generate_synthetic(spec)
    if spec.source == "directory":
        return read_directory(spec.path)
    raise DataError(f"unknown dataset source {spec.source!r}")


def write_directory(ds: Dataset, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        rel = f"samples/{i:06d}.rec"
        buf = io.BytesIO()
        write_record(buf, f"sample{i}", img)
        atomic_write_bytes(root / rel, buf.getvalue())
        lines.append(f"{int(lab)}\t{rel}\n")
    atomic_write_bytes(root / "index.tsv", "".join(lines).encode("utf-8"))


def read_directory(path) -> Dataset:
    root = Path(path)
    index = root / "index.tsv"
    if not index.exists():
        raise FileNotFoundError(f"dataset index not found: {index}")
    images, labels = [], []
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        label, sep, rel = line.partition("\t")
        if not sep or not label.strip().isdigit():
            raise FormatError(f"{index}:{lineno}: expected label<TAB>path with an integer label")
        buf = (root / rel).read_bytes()
        _, arr, end = read_record(buf, 0)
        if end != len(buf):
            raise FormatError(f"{rel}: trailing bytes after tensor record", offset=end)
        images.append(arr)
        labels.append(int(label))
    if not images:
        raise DataError(f"dataset at {root} is empty")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64))
