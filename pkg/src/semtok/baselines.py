"""Digital comparison schemes under a capacity bit budget.

An image may use at most ``b_max = q * log2(1 + SNR)`` bits over ``q``
channel uses and is assumed to arrive error-free. The resize scheme sends an
``L x L`` 8-bit thumbnail, the codec scheme the best quality a plug-in codec
fits in the budget. Either way the receiver upsamples back to the native size
and runs the unsplit classifier; an image that cannot be sent at all counts
as misclassified.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .data import Dataset

SCHEMES = ("resize", "codec")
BITS_PER_SAMPLE = 8
SWEEP_FIELDS = ("scheme", "q", "rho", "snr_db", "accuracy")


def capacity_bits(q: float, snr_db: float | None = None, *, snr_linear: float | None = None) -> float:
    """``q * log2(1 + snr)``; give the SNR in dB or, exactly, as a linear ratio."""
    if q < 0:
        raise ValueError("symbol count must be non-negative")
    if (snr_db is None) == (snr_linear is None):
        raise ValueError("give exactly one of snr_db and snr_linear")
    if snr_linear is None:
        snr_linear = 10.0 ** (snr_db / 10.0)
    return q * math.log2(1.0 + snr_linear)


def resize_side(b_max: float, channels: int = 3) -> int | None:
    """Largest L >= 1 with ``8 * channels * L**2 <= b_max``, or None when even L = 1 does not fit."""
    if b_max < 0:
        raise ValueError("bit budget must be non-negative")
    per_pixel = BITS_PER_SAMPLE * channels
    side = math.isqrt(int(b_max // per_pixel))
    return side if side >= 1 else None


def area_resize(image: np.ndarray, size: int) -> np.ndarray:
    """Downsample (C, H, W) to (C, size, size) by averaging overlapping source areas."""
    c, h, w = image.shape

    def weights(n_in: int) -> np.ndarray:
        edges_out = np.linspace(0, n_in, size + 1)
        lo, hi = edges_out[:-1, None], edges_out[1:, None]
        cells = np.arange(n_in)[None, :]
        overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0, None)
        return overlap / overlap.sum(axis=1, keepdims=True)

    return np.einsum("yh,chw,xw->cyx", weights(h), image, weights(w))


def nearest_upscale(image: np.ndarray, height: int, width: int) -> np.ndarray:
    c, h, w = image.shape
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return image[:, rows][:, :, cols]


def quantize(image: np.ndarray, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    return np.round(np.clip(image, 0.0, 1.0) * levels) / levels


# codec plug-ins ---------------------------------------------------------------------


@dataclass
class Payload:
    bits: int
    data: object
    quality: int


class CodecPlugin(Protocol):
    qualities: tuple[int, ...]  # ordered from lowest to highest

    def encode(self, image: np.ndarray, quality: int) -> Payload: ...

    def decode(self, payload: Payload) -> np.ndarray: ...


class QuantCodec:
    """Uniform re-quantization to ``k`` bits per sample at full resolution, k = 1..8."""

    qualities = tuple(range(1, 9))

    def encode(self, image: np.ndarray, quality: int) -> Payload:
        if quality not in self.qualities:
            raise ValueError(f"quality must be one of {self.qualities}")
        levels = np.round(np.clip(image, 0, 1) * ((1 << quality) - 1)).astype(np.uint8)
        return Payload(int(quality * image.size), levels, quality)

    def decode(self, payload: Payload) -> np.ndarray:
        return payload.data.astype(np.float64) / ((1 << payload.quality) - 1)


def codec_quality_fit(image: np.ndarray, b_max: float, plugin: CodecPlugin) -> Payload | None:
    """Highest quality whose payload fits in ``b_max`` bits, or None."""
    for quality in sorted(plugin.qualities, reverse=True):
        payload = plugin.encode(image, quality)
        if payload.bits <= b_max:
            return payload
    return None


# accuracy ---------------------------------------------------------------------------


def reconstruct(image: np.ndarray, b_max: float, scheme: str, plugin: CodecPlugin | None = None):
    """Received image at native size, or None when nothing fits the budget."""
    c, h, w = image.shape
    if scheme == "resize":
        side = resize_side(b_max, c)
        if side is None:
            return None
        side = min(side, h, w)  # no point sending more than the native grid
        thumb = quantize(area_resize(image, side), BITS_PER_SAMPLE)
        return nearest_upscale(thumb, h, w)
    if scheme == "codec":
        plugin = plugin or QuantCodec()
        payload = codec_quality_fit(image, b_max, plugin)
        if payload is None:
            return None
        return nearest_upscale(plugin.decode(payload), h, w)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def digital_baseline_accuracy(dataset: Dataset, q: float, snr_db: float, scheme: str,
                              classifier: Callable[[np.ndarray], np.ndarray],
                              plugin: CodecPlugin | None = None, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``classifier`` (images -> logits) on reconstructed images."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    b_max = capacity_bits(q, snr_db)
    received, labels = [], []
    for image, label in zip(dataset.images, dataset.labels):
        rec = reconstruct(image, b_max, scheme, plugin)
        if rec is not None:
            received.append(rec)
            labels.append(label)
    if not received:
        return 0.0
    received, labels = np.stack(received), np.asarray(labels)
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits = classifier(received[start : start + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return hits / len(dataset)


@dataclass
class SweepPoint:
    scheme: str
    q: float
    rho: float
    snr_db: float
    accuracy: float


def sweep(dataset: Dataset, rhos, snrs_db, classifier, schemes=SCHEMES,
          plugin: CodecPlugin | None = None) -> list[SweepPoint]:
    """Accuracy for each scheme over ratios ``rho = q / p`` and SNRs."""
    p = int(np.prod(dataset.images.shape[1:]))
    points = []
    for scheme in schemes:
        for snr in snrs_db:
            for rho in rhos:
                q = rho * p
                acc = digital_baseline_accuracy(dataset, q, snr, scheme, classifier, plugin)
                points.append(SweepPoint(scheme, float(q), float(rho), float(snr), acc))
    return points


def write_sweep(path, points: list[SweepPoint]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_FIELDS)
        for pt in points:
            writer.writerow([pt.scheme, f"{pt.q:.10g}", f"{pt.rho:.10g}", f"{pt.snr_db:g}", f"{pt.accuracy:.10g}"])
    return path


def read_sweep(path) -> list[SweepPoint]:
    with Path(path).open(newline="") as fh:
        return [SweepPoint(row["scheme"], float(row["q"]), float(row["rho"]), float(row["snr_db"]),
                           float(row["accuracy"])) for row in csv.DictReader(fh)]
