"""Hyperspectral cube and label-raster I/O, patching, and sampling.

Cubes are H x W x B float32 arrays, label rasters H x W uint16 with
0 = unlabeled, 1..C = known classes, C+1 = novel (evaluation only).
File formats are purpose-built raw rasters with one-line ASCII headers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PATCH_SIZE = 9

CUBE_MAGIC = "HSIC"
LABEL_MAGIC = "HSIL"


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format."""


class NormStats(NamedTuple):
    band_min: np.ndarray
    band_max: np.ndarray


@dataclass
class Sample:
    patch: np.ndarray  # [size, size, B] float32
    label: int
    coord: tuple[int, int]
    tag: str  # orig | hflip | vflip | dflip


@dataclass
class SampleSet:
    """Batched training samples; after augmentation, 4x the drawn pixels."""

    patches: np.ndarray  # [M, size, size, B] float32
    labels: np.ndarray  # [M] int32, values in 1..C
    coords: np.ndarray  # [M, 2] int32 source pixel
    tags: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


@dataclass
class SplitSpec:
    nos: int
    seed: int
    num_classes: int
    train: dict[int, np.ndarray]  # class -> [k, 2] pixel coords

    def train_coords(self):
        return np.concatenate([self.train[c] for c in sorted(self.train)], axis=0)

    def test_coords(self, labels):
        """All labeled pixels (novel included) not drawn for training."""
        taken = {(int(r), int(c)) for r, c in self.train_coords()}
        coords = np.argwhere(labels > 0)
        keep = [i for i, (r, c) in enumerate(coords)
                if (int(r), int(c)) not in taken]
        return coords[keep]


def write_cube(cube, path):
    cube = np.ascontiguousarray(cube, dtype=np.float32)
    if cube.ndim != 3:
        raise FormatError(f"cube must be H x W x B, got shape {cube.shape}")
    h, w, b = cube.shape
    with open(path, "wb") as f:
        f.write(f"{CUBE_MAGIC} v1 {h} {w} {b} float32 le\n".encode("ascii"))
        f.write(cube.astype("<f4").tobytes())


def read_cube(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 7 or parts[0] != CUBE_MAGIC or parts[1] != "v1" \
                or parts[5] != "float32" or parts[6] != "le":
            raise FormatError(f"bad cube header: {header!r}")
        try:
            h, w, b = (int(p) for p in parts[2:5])
        except ValueError as e:
            raise FormatError(f"bad cube dimensions in header: {header!r}") from e
        if min(h, w, b) < 1 or h * w * b > 2**31:
            raise FormatError(f"cube dimensions out of range: {h}x{w}x{b}")
        raw = f.read(h * w * b * 4)
        if len(raw) != h * w * b * 4:
            raise FormatError(
                f"truncated cube: expected {h * w * b * 4} payload bytes, "
                f"got {len(raw)}")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w, b).copy()


def write_labels(labels, path):
    labels = np.ascontiguousarray(labels, dtype=np.uint16)
    if labels.ndim != 2:
        raise FormatError(f"labels must be H x W, got shape {labels.shape}")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"{LABEL_MAGIC} v1 {h} {w} u16 le\n".encode("ascii"))
        f.write(labels.astype("<u2").tobytes())


def read_labels(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 6 or parts[0] != LABEL_MAGIC or parts[1] != "v1" \
                or parts[4] != "u16" or parts[5] != "le":
            raise FormatError(f"bad label header: {header!r}")
        try:
            h, w = int(parts[2]), int(parts[3])
        except ValueError as e:
            raise FormatError(f"bad label dimensions in header: {header!r}") from e
        if min(h, w) < 1:
            raise FormatError(f"label dimensions out of range: {h}x{w}")
        raw = f.read(h * w * 2)
        if len(raw) != h * w * 2:
            raise FormatError(
                f"truncated labels: expected {h * w * 2} payload bytes, "
                f"got {len(raw)}")
        return np.frombuffer(raw, dtype="<u2").reshape(h, w).copy()


def normalize(cube):
    """Per-band min-max scaling onto [0,1]; constant bands map to 0."""
    cube = np.asarray(cube, dtype=np.float32)
    lo = cube.min(axis=(0, 1))
    hi = cube.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = ((cube - lo) / safe).astype(np.float32)
    return out, NormStats(lo, hi)


def _reflect_index(i, n):
    """Mirror an index about the raster edges (no edge repetition)."""
    if n == 1:
        return np.zeros_like(i) if isinstance(i, np.ndarray) else 0
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i < n, i, period - i) if isinstance(i, np.ndarray) \
        else (i if i < n else period - i)


def extract_patch(cube, row, col, size=PATCH_SIZE):
    """Window centered at (row, col); borders resolved by mirror reflection."""
    h, w, _ = cube.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"patch center ({row},{col}) outside {h}x{w} cube")
    r = size // 2
    rows = _reflect_index(np.arange(row - r, row + r + 1), h)
    cols = _reflect_index(np.arange(col - r, col + r + 1), w)
    return cube[np.ix_(rows, cols)]


def extract_patches(cube, coords, size=PATCH_SIZE):
    """Batched extract_patch for an [M,2] coordinate array."""
    h, w, _ = cube.shape
    coords = np.asarray(coords)
    r = size // 2
    offs = np.arange(-r, r + 1)
    rows = _reflect_index(coords[:, 0:1] + offs[np.newaxis, :], h)  # [M,size]
    cols = _reflect_index(coords[:, 1:2] + offs[np.newaxis, :], w)
    return np.ascontiguousarray(
        cube[rows[:, :, np.newaxis], cols[:, np.newaxis, :]])


def augment(sample: Sample) -> list[Sample]:
    """Original plus horizontal, vertical, and both-axes flips."""
    p = sample.patch
    return [
        Sample(p, sample.label, sample.coord, "orig"),
        Sample(p[:, ::-1].copy(), sample.label, sample.coord, "hflip"),
        Sample(p[::-1, :].copy(), sample.label, sample.coord, "vflip"),
        Sample(p[::-1, ::-1].copy(), sample.label, sample.coord, "dflip"),
    ]


def sample_split(labels, nos, seed, num_classes=None):
    """Draw a stratified few-shot training split without replacement.

    num_classes gives the known-class count C; when omitted it defaults to
    the largest code present, which is only valid for rasters without a
    novel class.
    """
    labels = np.asarray(labels)
    c = int(num_classes) if num_classes else int(labels.max())
    if c < 1:
        raise ValueError("label raster contains no labeled pixels")
    if labels.max() > c + 1:
        raise ValueError(
            f"label code {int(labels.max())} exceeds novel code {c + 1}")
    rng = np.random.default_rng(seed)
    train = {}
    for cls in range(1, c + 1):
        coords = np.argwhere(labels == cls)
        if len(coords) == 0:
            raise ValueError(f"class {cls} has no labeled pixels")
        take = min(nos, len(coords))
        if take < nos:
            warnings.warn(
                f"class {cls} has only {len(coords)} pixels; "
                f"taking all of them instead of {nos}")
        idx = rng.choice(len(coords), size=take, replace=False)
        train[cls] = coords[np.sort(idx)].astype(np.int32)
    return SplitSpec(nos=nos, seed=seed, num_classes=c, train=train)


def write_split(split: SplitSpec, path):
    with open(path, "w") as f:
        f.write(f"SEED {split.seed} NOS {split.nos}\n")
        for cls in sorted(split.train):
            for r, c in split.train[cls]:
                f.write(f"{cls} {int(r)} {int(c)}\n")


def read_split(path):
    with open(path) as f:
        head = f.readline().split()
        if len(head) != 4 or head[0] != "SEED" or head[2] != "NOS":
            raise FormatError(f"bad split header in {path}")
        seed, nos = int(head[1]), int(head[3])
        train: dict[int, list] = {}
        for line in f:
            if not line.strip():
                continue
            cls, r, c = (int(v) for v in line.split())
            train.setdefault(cls, []).append((r, c))
    spec = SplitSpec(
        nos=nos, seed=seed, num_classes=max(train),
        train={cls: np.asarray(v, dtype=np.int32) for cls, v in train.items()})
    return spec


def build_sample_set(norm_cube, split: SplitSpec) -> SampleSet:
    """Extract and 4x-augment the training patches for a split."""
    patches, labels, coords, tags = [], [], [], []
    for cls in sorted(split.train):
        for r, c in split.train[cls]:
            base = Sample(extract_patch(norm_cube, int(r), int(c)),
                          cls, (int(r), int(c)), "orig")
            for s in augment(base):
                patches.append(s.patch)
                labels.append(s.label)
                coords.append(s.coord)
                tags.append(s.tag)
    return SampleSet(
        patches=np.stack(patches).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int32),
        coords=np.asarray(coords, dtype=np.int32),
        tags=tags,
    )


def load_synth_spec(path):
    with open(path) as f:
        return json.load(f)


def synth_cube(spec, seed):
    """Generate a cube and label raster from Gaussian spectral prototypes.

    spec keys: height, width, bands, noise_sigma, classes (list of
    {center, width, amplitude} with center/width as band-axis fractions),
    optional unknown prototype and unknown_fraction (right-hand stripe of
    columns coded C+1).
    """
    h, w, b = int(spec["height"]), int(spec["width"]), int(spec["bands"])
    sigma = float(spec.get("noise_sigma", 0.0))
    protos = spec["classes"]
    c = len(protos)
    unknown = spec.get("unknown")
    ufrac = float(spec.get("unknown_fraction", 0.0))
    if unknown is None:
        ufrac = 0.0

    axis = np.arange(b, dtype=np.float64)

    def spectrum(p):
        center = float(p["center"]) * (b - 1 if b > 1 else 1)
        width = max(float(p["width"]) * b, 1e-6)
        amp = float(p.get("amplitude", 1.0))
        return 0.1 + amp * np.exp(-0.5 * ((axis - center) / width) ** 2)

    labels = np.zeros((h, w), dtype=np.uint16)
    ucols = int(round(w * ufrac))
    known_w = w - ucols
    if known_w < c:
        raise ValueError("cube too narrow for the requested class stripes")
    edges = np.linspace(0, known_w, c + 1).astype(int)
    for i in range(c):
        labels[:, edges[i]:edges[i + 1]] = i + 1
    if ucols:
        labels[:, known_w:] = c + 1

    cube = np.empty((h, w, b), dtype=np.float64)
    for i in range(c):
        cube[labels == i + 1] = spectrum(protos[i])
    if ucols:
        cube[labels == c + 1] = spectrum(unknown)
    rng = np.random.default_rng(seed)
    if sigma > 0:
        cube += rng.normal(0.0, sigma, size=cube.shape)
    return cube.astype(np.float32), labels
