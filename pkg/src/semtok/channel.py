"""Token compression to complex symbols and the simulated wireless link.

Symbols are handled as a (real, imag) pair of arrays so the encoder and
decoder stay differentiable end to end. SNR is per symbol: with unit
average transmit power, ``noise_var = |h|^2 / 10**(snr_db / 10)`` for AWGN
(``h = 1``) and ``sigma_h^2 / 10**(snr_db / 10)`` for slow fading.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Value
from .layers import FeedForward, Module

log = logging.getLogger(__name__)

RATIO_GRID = (0.005, 0.1, 0.15, 0.25, 0.5)
MODES = ("noiseless", "awgn", "slow_fading")
INFINITE_SNR = float("inf")


def symbols_per_token(r: float, dim: int) -> int:
    """``o_r = max(1, round(r * d))``."""
    if not 0 < r <= 1:
        raise ValueError(f"compression factor must lie in (0, 1], got {r}")
    return max(1, int(round(r * dim)))


def ratio_key(r: float) -> str:
    return f"r{r:g}"


class Codec(Module):
    """Encoder pair (real, imaginary) and decoder for one compression factor."""

    def __init__(self, dim: int, r: float, rng: np.random.Generator):
        self.r = r
        self.out_dim = symbols_per_token(r, dim)
        o = self.out_dim
        self.c_real = FeedForward([dim, dim, o], rng, he_init=True)
        self.c_imag = FeedForward([dim, dim, o], rng, he_init=True)
        self.c_dec = FeedForward([2 * o, dim, dim], rng, he_init=True)


class CodecBank(Module):
    def __init__(self, dim: int, ratios, rng: np.random.Generator):
        self.dim = dim
        self.ratios = tuple(float(r) for r in ratios)
        if not self.ratios:
            raise ValueError("codec bank needs at least one ratio")
        self.codecs = {ratio_key(r): Codec(dim, r, rng) for r in self.ratios}

    def __getitem__(self, r: float) -> Codec:
        try:
            return self.codecs[ratio_key(r)]
        except KeyError:
            raise KeyError(f"compression factor {r} not in bank {self.ratios}") from None


@dataclass
class SymbolBlock:
    """Transmitted payload. ``real``/``imag`` are (n_alpha, o_r) or batched (B, m, o_r)."""

    real: Value
    imag: Value
    r: float
    n_alpha: int | np.ndarray
    indices: np.ndarray | None = None
    degenerate: bool | np.ndarray = False

    @property
    def q(self):
        return np.asarray(self.n_alpha) * self.real.shape[-1]

    def complex(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


def power_normalize(s: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale a complex vector to unit average power; zero vectors pass through flagged."""
    s = np.asarray(s, dtype=complex).reshape(-1)
    if s.size < 1:
        raise ValueError("power_normalize needs at least one symbol")
    norm = np.sqrt(np.sum(np.abs(s) ** 2))
    if norm == 0:
        log.warning("degenerate all-zero payload transmitted unnormalized")
        return s.copy(), True
    return s * (np.sqrt(s.size) / norm), False


def normalize_parts(real, imag, keep: np.ndarray | None = None):
    """Differentiable per-sample power normalization of batched symbols.

    ``real``/``imag`` are (B, m, o); ``keep`` (B, m) selects the rows that are
    actually transmitted. Returns normalized parts and a per-sample
    degenerate flag; degenerate samples are left as zeros.
    """
    real, imag = dc._wrap(real), dc._wrap(imag)
    b, m, o = real.shape
    keep = np.ones((b, m), dtype=bool) if keep is None else np.asarray(keep, dtype=bool)
    keep_f = keep[..., None].astype(dc.DTYPE)
    real, imag = real * keep_f, imag * keep_f
    energy = dc.sum(real * real + imag * imag, axis=(1, 2), keepdims=True)
    q = keep.sum(axis=1).reshape(b, 1, 1) * o
    degenerate = (energy.data.reshape(-1) == 0)
    if degenerate.any():
        log.warning("%d degenerate all-zero payloads", int(degenerate.sum()))
        energy = energy + degenerate.reshape(b, 1, 1).astype(dc.DTYPE)
    scale = dc.power(energy * (1.0 / q), -0.5)
    return real * scale, imag * scale, degenerate


def encode_symbols(tokens, r: float, bank: CodecBank, keep: np.ndarray | None = None) -> SymbolBlock:
    """Map retained tokens (n_alpha, d) or a batch (B, m, d) to normalized symbols."""
    codec = bank[r]
    tokens = dc._wrap(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = dc.reshape(tokens, (1,) + tokens.shape)
        keep = None if keep is None else np.asarray(keep)[None]
    if tokens.shape[-1] != bank.dim:
        raise ShapeError(f"encode_symbols: token width {tokens.shape[-1]} != {bank.dim}")
    real, imag, degenerate = normalize_parts(codec.c_real(tokens), codec.c_imag(tokens), keep)
    b, m, o = real.shape
    n_alpha = np.full(b, m) if keep is None else np.asarray(keep).sum(axis=1)
    if single:
        real, imag = dc.reshape(real, (m, o)), dc.reshape(imag, (m, o))
        return SymbolBlock(real, imag, r, int(n_alpha[0]), degenerate=bool(degenerate[0]))
    return SymbolBlock(real, imag, r, n_alpha, degenerate=degenerate)


def decode_symbols(block: SymbolBlock, r: float, bank: CodecBank) -> Value:
    """Concatenate [Re, Im] per token and run the decoder network."""
    if not np.isclose(block.r, r):
        raise ValueError(f"decode_symbols: block encoded at r={block.r}, decoder asked for r={r}")
    codec = bank[r]
    if block.real.shape[-1] != codec.out_dim:
        raise ShapeError(f"decode_symbols: {block.real.shape[-1]} symbols/token, codec expects {codec.out_dim}")
    return codec.c_dec(dc.concat([block.real, block.imag], axis=-1))


@dataclass
class ChannelDraw:
    """Channel state for one task, or for a batch when ``h``/``noise_var`` are vectors."""

    mode: str
    h: complex | np.ndarray
    noise_var: float | np.ndarray
    rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown channel mode {self.mode!r}")
        if np.any(np.asarray(self.noise_var) < 0):
            raise ValueError("noise variance must be non-negative")


def noise_variance(snr_db, gain_power: float = 1.0):
    return gain_power / 10.0 ** (np.asarray(snr_db, dtype=dc.DTYPE) / 10.0)


def draw_channel(mode: str, snr_db=None, rng: np.random.Generator | None = None,
                 fading_var: float = 1.0) -> ChannelDraw:
    """One channel realization per inference task.

    ``snr_db`` may be a vector (one entry per sample in a batch); the gain is
    then still a single scalar for AWGN and noiseless modes.
    """
    if mode == "noiseless":
        return ChannelDraw("noiseless", 1.0 + 0j, 0.0, rng)
    if snr_db is None:
        raise ValueError(f"{mode} channel needs an SNR")
    if mode == "awgn":
        return ChannelDraw("awgn", 1.0 + 0j, noise_variance(snr_db), rng)
    if mode == "slow_fading":
        if fading_var < 0:
            raise ValueError("fading variance must be non-negative")
        if rng is None:
            raise ValueError("slow fading needs an rng")
        h = np.sqrt(fading_var / 2.0) * complex(rng.standard_normal(), rng.standard_normal())
        return ChannelDraw("slow_fading", h, noise_variance(snr_db, fading_var), rng)
    raise ValueError(f"unknown channel mode {mode!r}")


def complex_noise(shape, noise_var, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """CN(0, noise_var) samples as (real, imag); ``noise_var`` broadcasts against ``shape``."""
    std = np.sqrt(np.asarray(noise_var, dtype=dc.DTYPE) / 2.0)
    return std * rng.standard_normal(shape), std * rng.standard_normal(shape)


def channel_apply(block: SymbolBlock, draw: ChannelDraw) -> SymbolBlock:
    """``s' = h s + n`` elementwise; per-sample noise variance broadcasts over rows."""
    real, imag = block.real, block.imag
    per_sample = (-1,) + (1,) * (real.ndim - 1)
    h = np.asarray(draw.h, dtype=complex)
    hr, hi = np.real(h), np.imag(h)
    if h.ndim == 1:
        hr, hi = hr.reshape(per_sample), hi.reshape(per_sample)
    if np.any(hi != 0.0):
        real, imag = real * hr - imag * hi, imag * hr + block.real * hi
    elif np.any(hr != 1.0):
        real, imag = real * hr, imag * hr
    var = np.asarray(draw.noise_var, dtype=dc.DTYPE)
    if np.any(var > 0):
        if draw.rng is None:
            raise ValueError("noisy channel needs an rng")
        if var.ndim == 1:
            var = var.reshape(per_sample)
        nr, ni = complex_noise(real.shape, var, draw.rng)
        real, imag = real + nr, imag + ni
    return SymbolBlock(real, imag, block.r, block.n_alpha, block.indices, block.degenerate)


def compression_ratio(n_alpha, o_r: int, p: int):
    """Transmitted complex symbols over input size."""
    if p <= 0:
        raise ValueError("input size must be positive")
    return np.asarray(n_alpha) * o_r / p if np.ndim(n_alpha) else n_alpha * o_r / p


def measured_snr(draw: ChannelDraw, s) -> float:
    """Per-symbol SNR in dB, ``10 log10(|h|^2 * mean|s|^2 / noise_var)``."""
    if isinstance(s, SymbolBlock):
        s = s.complex()
    s = np.asarray(s).reshape(-1)
    var = float(np.asarray(draw.noise_var))
    if var == 0:
        return INFINITE_SNR
    power = np.mean(np.abs(s) ** 2)
    return float(10.0 * np.log10(abs(complex(draw.h)) ** 2 * power / var))


def batch_channel(mode: str, snr_db, rng: np.random.Generator | None,
                  fading_var: float = 1.0) -> ChannelDraw:
    """Independent per-sample draws packed into one ChannelDraw (vector ``h``, ``noise_var``)."""
    snr_db = np.atleast_1d(np.asarray(snr_db, dtype=dc.DTYPE))
    if mode == "noiseless":
        return ChannelDraw("noiseless", np.ones(snr_db.size, dtype=complex), 0.0, rng)
    if mode == "awgn":
        return ChannelDraw("awgn", np.ones(snr_db.size, dtype=complex), noise_variance(snr_db), rng)
    if mode == "slow_fading":
        scale = np.sqrt(fading_var / 2.0)
        h = scale * (rng.standard_normal(snr_db.size) + 1j * rng.standard_normal(snr_db.size))
        return ChannelDraw("slow_fading", h, noise_variance(snr_db, fading_var), rng)
    raise ValueError(f"unknown channel mode {mode!r}")
