"""Synthetic fine-grained dataset and the on-disk dataset layout.

Every image shares the same background statistics; the class is carried
only by a small stamped cue (its pattern and its anchor location), jittered
per sample by up to one patch in each direction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pnm import read_pnm, to_uint8, write_pnm

MANIFEST = "manifest.tsv"


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    samples_per_class: int = 50
    image_height: int = 32
    image_width: int = 32
    patch_size: int = 8
    background_seed: int = 7
    cue_size: int = 8
    cue_contrast: float = 0.8
    noise_std: float = 0.1
    jitter: int | None = None  # max cue offset in pixels per axis; None -> one patch

    def __post_init__(self):
        if self.jitter is None:
            self.jitter = self.patch_size


@dataclass
class Split:
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int


def _background(spec: SyntheticSpec) -> np.ndarray:
    """Smooth shared texture: coarse noise upsampled to full resolution."""
    rng = np.random.default_rng(spec.background_seed)
    coarse = rng.uniform(0.25, 0.75, size=(spec.image_height // 4 + 1, spec.image_width // 4 + 1))
    texture = np.kron(coarse, np.ones((4, 4)))[: spec.image_height, : spec.image_width]
    return texture


def class_cues(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class binary cue patterns (C, s, s) and anchor corners (C, 2)."""
    rng = np.random.default_rng([spec.background_seed, 1])
    s = spec.cue_size
    block = max(1, s // 4)
    coarse = rng.integers(0, 2, size=(spec.num_classes, -(-s // block), -(-s // block)))
    patterns = np.kron(coarse, np.ones((1, block, block)))[:, :s, :s].astype(np.float64)
    rows = np.arange(0, spec.image_height - s + 1, spec.patch_size)
    cols = np.arange(0, spec.image_width - s + 1, spec.patch_size)
    lattice = np.array([(r, c) for r in rows for c in cols])
    stride = max(1, len(lattice) // spec.num_classes)
    anchors = lattice[(np.arange(spec.num_classes) * stride) % len(lattice)]
    return patterns, anchors


def render(spec: SyntheticSpec, label: int, rng: np.random.Generator, background=None, cues=None):
    """One image (H, W, 1), quantised to 8-bit levels."""
    if background is None:
        background = _background(spec)
    patterns, anchors = cues if cues is not None else class_cues(spec)
    img = background + rng.normal(0.0, spec.noise_std, size=background.shape)
    s = spec.cue_size
    jitter = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
    r0 = int(np.clip(anchors[label][0] + jitter[0], 0, spec.image_height - s))
    c0 = int(np.clip(anchors[label][1] + jitter[1], 0, spec.image_width - s))
    region = img[r0 : r0 + s, c0 : c0 + s]
    img[r0 : r0 + s, c0 : c0 + s] = (1 - spec.cue_contrast) * region + spec.cue_contrast * patterns[label]
    return (to_uint8(np.clip(img, 0.0, 1.0)).astype(np.float32) / 255.0)[:, :, None]


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Deterministic in (spec, seed). Stratified 80/20 train/test split."""
    s = spec.cue_size
    if s >= min(spec.image_height, spec.image_width):
        raise ValueError(f"cue of size {s} does not fit a {spec.image_height}x{spec.image_width} image")
    if spec.samples_per_class < 2:
        raise ValueError("need at least 2 samples per class for a train/test split")
    rng = np.random.default_rng(seed)
    background = _background(spec)
    cues = class_cues(spec)
    n_test = max(1, round(0.2 * spec.samples_per_class))
    parts = {"train": ([], []), "test": ([], [])}
    for label in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            split = "test" if i >= spec.samples_per_class - n_test else "train"
            parts[split][0].append(render(spec, label, rng, background, cues))
            parts[split][1].append(label)
    splits = {
        k: Split(np.stack(imgs).astype(np.float32), np.asarray(labels, dtype=np.int64))
        for k, (imgs, labels) in parts.items()
    }
    return Dataset(splits["train"], splits["test"], spec.num_classes)


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write PGM/PPM files plus manifest.tsv (path, label, split)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name in ("train", "test"):
        split = getattr(ds, split_name)
        ext = "pgm" if split.images.shape[-1] == 1 else "ppm"
        for i, (img, label) in enumerate(zip(split.images, split.labels)):
            rel = f"{split_name}/{i:05d}_c{int(label)}.{ext}"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_pnm(out / rel, img)
            rows.append((rel, int(label), split_name))
    with open(out / MANIFEST, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("path", "label", "split"))
        writer.writerows(rows)
    return out


def load_dataset(root, num_classes: int | None = None) -> Dataset:
    root = Path(root)
    with open(root / MANIFEST, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and rows[0] == ["path", "label", "split"]:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{root / MANIFEST} lists no images")
    parts = {"train": ([], []), "test": ([], [])}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 3 or row[2] not in parts:
            raise ValueError(f"{MANIFEST}:{lineno}: expected path<TAB>label<TAB>train|test, got {row}")
        parts[row[2]][0].append(read_pnm(root / row[0]))
        parts[row[2]][1].append(int(row[1]))

    def _split(imgs, labels):
        if not imgs:
            return Split(np.zeros((0,) + parts_shape, np.float32), np.zeros(0, np.int64))
        return Split(np.stack(imgs), np.asarray(labels, dtype=np.int64))

    parts_shape = next(p[0][0].shape for p in parts.values() if p[0])
    all_labels = [lab for p in parts.values() for lab in p[1]]
    return Dataset(
        _split(*parts["train"]),
        _split(*parts["test"]),
        num_classes if num_classes is not None else max(all_labels) + 1,
    )
