"""Deterministic toy image dataset and its raster file container.

Each image shows one geometric figure (the class) at a random position,
scale and colour over a textured background with small distractor blobs.
Images are stored as uint8, so regenerating with the same seed is
byte-identical.

Container layout (little-endian)::

    magic  b"STRASTER"   8 bytes
    version             uint32
    count, C, H, W      uint32 x 4
    labels              count x uint16
    pixels              count x C x H x W uint8, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

MAGIC = b"STRASTER"
VERSION = 1

SHAPES = (
    "disk",
    "ring",
    "square",
    "frame",
    "triangle",
    "cross",
    "diagonal",
    "hstripes",
    "vstripes",
    "dots",
)


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_classes: int = 10
    per_class: int = 100
    channels: int = 3
    height: int = 32
    width: int = 32
    test_fraction: float = 0.2
    clutter: int = 3
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in 1..{len(SHAPES)}")
        if self.per_class < 1 or not 0 <= self.test_fraction < 1:
            raise ValueError("invalid sample counts")
        if self.channels not in (1, 3) or min(self.height, self.width) < 8:
            raise ValueError("images must be 1 or 3 channels and at least 8x8")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx])


def _figure(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary stencil of a figure in a size x size box."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    r = np.hypot(yy - c, xx - c)
    t = max(1.5, size / 6.0)
    if kind == "disk":
        return r <= c - 0.5
    if kind == "ring":
        return (r <= c - 0.5) & (r >= c - 0.5 - t)
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "frame":
        edge = int(np.ceil(t))
        m = np.ones((size, size), bool)
        m[edge:-edge, edge:-edge] = False
        return m
    if kind == "triangle":
        return yy >= 2 * np.abs(xx - c)
    if kind == "cross":
        return (np.abs(yy - c) <= t / 2 + 0.5) | (np.abs(xx - c) <= t / 2 + 0.5)
    if kind == "diagonal":
        return (np.abs(yy - xx) <= t) | (np.abs(yy + xx - size) <= t)
    if kind == "hstripes":
        return (np.floor(yy / 2) % 2) == 0
    if kind == "vstripes":
        return (np.floor(xx / 2) % 2) == 0
    if kind == "dots":
        m = np.zeros((size, size), bool)
        for cy in (size * 0.25, size * 0.75):
            for cx in (size * 0.25, size * 0.75):
                m |= np.hypot(yy - cy, xx - cx) <= size / 7.0 + 0.5
        return m
    raise ValueError(kind)


def render(kind: str, spec: ToyDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    c, h, w = spec.channels, spec.height, spec.width
    base = rng.uniform(0.1, 0.5, size=(c, 1, 1))
    grad = rng.uniform(-0.15, 0.15, size=(c, 1, 1)) * np.linspace(-1, 1, w)[None, None, :]
    img = base + grad + spec.noise * rng.standard_normal((c, h, w))
    for _ in range(spec.clutter):
        s = int(rng.integers(2, 4))
        y, x = rng.integers(0, h - s), rng.integers(0, w - s)
        img[:, y : y + s, x : x + s] = rng.uniform(0, 1, size=(c, 1, 1))
    size = int(rng.integers(max(8, h // 3), max(9, h // 2 + 3)))
    y, x = rng.integers(0, h - size + 1), rng.integers(0, w - size + 1)
    stencil = _figure(kind, size, rng)
    colour = rng.uniform(0.65, 1.0, size=(c, 1, 1))
    patch = img[:, y : y + size, x : x + size]
    img[:, y : y + size, x : x + size] = np.where(stencil[None], colour, patch)
    return np.clip(img, 0.0, 1.0)


def generate(spec: ToyDatasetSpec) -> tuple[Dataset, Dataset]:
    """Return (train, test). Labels are balanced; the split is stratified."""
    rng = stream(spec.seed, "data")
    n = spec.num_classes * spec.per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    pixels = np.empty((n, spec.channels, spec.height, spec.width), dtype=np.uint8)
    for i, label in enumerate(labels):
        pixels[i] = np.round(render(SHAPES[label], spec, rng) * 255).astype(np.uint8)
    n_test = int(round(spec.per_class * spec.test_fraction))
    test_mask = np.zeros(n, bool)
    for k in range(spec.num_classes):
        test_mask[np.flatnonzero(labels == k)[:n_test]] = True
    images = pixels.astype(np.float64) / 255.0
    train_idx = rng.permutation(np.flatnonzero(~test_mask))
    test_idx = rng.permutation(np.flatnonzero(test_mask))
    return Dataset(images[train_idx], labels[train_idx]), Dataset(images[test_idx], labels[test_idx])


def write_raster(path, data: Dataset) -> None:
    path = Path(path)
    n, c, h, w = data.images.shape
    pixels = np.round(np.clip(data.images, 0, 1) * 255).astype(np.uint8)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, n, c, h, w))
        fh.write(data.labels.astype("<u2").tobytes())
        fh.write(pixels.tobytes(order="C"))


def read_raster(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a raster container")
    version, n, c, h, w = struct.unpack_from("<5I", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported raster version {version}")
    off = 8 + 20
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * c * h * w, offset=off)
    if pixels.size != n * c * h * w:
        raise ValueError(f"{path}: truncated pixel payload")
    return Dataset(pixels.reshape(n, c, h, w).astype(np.float64) / 255.0, labels)


def generate_toy_dataset(spec: ToyDatasetSpec, out_dir) -> tuple[Path, Path]:
    """Write ``train.raster`` and ``test.raster`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    train, test = generate(spec)
    paths = out / "train.raster", out / "test.raster"
    write_raster(paths[0], train)
    write_raster(paths[1], test)
    return paths
