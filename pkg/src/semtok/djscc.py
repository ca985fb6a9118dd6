"""The split transmitter/receiver model: ViT encoder with token selection,
per-ratio symbol codec, channel, and ViT decoder with the classification head.

Training runs batched with soft masks: discarded rows stay in the tensor as
zeros and are hidden from attention as keys, so a zero mask entry behaves
exactly like a removed token. The budget row conditions selection only; it
is never transmitted, so the receiver sees retained patches and the class
token. :meth:`DJSCC.infer_sample` runs one image with
rows physically removed; :meth:`DJSCC.forward` with ``hard=True`` is its
batched equivalent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .channel import (
    ChannelDraw,
    CodecBank,
    SymbolBlock,
    channel_apply,
    compression_ratio,
    decode_symbols,
    encode_symbols,
)
from .diffcore import Value
from .layers import Module
from .selection import (
    BudgetPair,
    SelectionStep,
    Selector,
    apply_selection,
    make_budget_token,
    pinned_mask,
    selection_step,
)
from .vit import ModelConfig, ViT, split_model


@dataclass
class ForwardResult:
    logits: Value
    steps: list[SelectionStep]  # one per adaptive block
    keep: np.ndarray  # rows transmitted (retained patches and class token), (B, m) bool
    ratios: np.ndarray  # compression factor used per sample
    n_alpha: np.ndarray = field(init=False)

    def __post_init__(self):
        self.n_alpha = self.keep.sum(axis=1)

    @property
    def masks(self) -> list[Value]:
        """Soft mask after each adaptive block, (B, m)."""
        return [step.mask for step in self.steps]


@dataclass
class SampleResult:
    logits: np.ndarray
    retained: list[np.ndarray]  # surviving original row indices after each adaptive block
    n_alpha: int
    symbols: SymbolBlock
    rho: float


class DJSCC(Module):
    def __init__(self, config: ModelConfig, ratios, rng: np.random.Generator):
        self.config = config
        self.vit = ViT(config, rng)
        self.budget = BudgetPair(config.dim, rng)
        self.selectors = [Selector(config.dim, rng) for _ in range(config.split)]
        self.bank = CodecBank(config.dim, ratios, rng)

    @property
    def ratios(self) -> tuple[float, ...]:
        return self.bank.ratios

    def encoder_blocks(self):
        return split_model(self.vit, self.config.split)[0]

    def decoder_blocks(self):
        return split_model(self.vit, self.config.split)[1]

    def embed(self, images, alphas) -> Value:
        images = np.asarray(images, dtype=dc.DTYPE)
        alphas = np.broadcast_to(np.asarray(alphas, dtype=dc.DTYPE), (images.shape[0],))
        return self.vit.embed(images, make_budget_token(alphas, self.budget))

    # batched path -----------------------------------------------------------

    def encode(self, images, alphas, select: bool = True, hard: bool = False, gate_noise=None,
               straight_through: bool = False):
        """Run the transmitter blocks. Returns (tokens, selection steps, keep).

        ``gate_noise`` is None or (s, B, m) logit noise, one slice per adaptive block.
        ``hard`` passes kept rows unscaled. ``straight_through`` gives the same
        forward values but backpropagates as if rows were scaled by the mask.
        """
        x = self.embed(images, alphas)
        b, m, _ = x.shape
        mask: Value | np.ndarray = np.ones((b, m))
        steps = []
        keep = None
        for i, (block, selector) in enumerate(zip(self.encoder_blocks(), self.selectors)):
            if select:
                budget_rows = dc.reshape(dc.take(x, [m - 1], axis=-2), (b, x.shape[-1]))
                noise = None if gate_noise is None else gate_noise[i]
                step = selection_step(x, budget_rows, mask, selector, noise)
                steps.append(step)
                mask = step.mask
                keep = mask.data > 0
                if hard:
                    x = x * keep[..., None].astype(dc.DTYPE)
                elif straight_through:
                    factor = mask + (keep.astype(dc.DTYPE) - mask.data)  # value: keep
                    x = x * dc.reshape(factor, factor.shape + (1,))
                else:
                    x = step.tokens
            x = block(x, keep)
        if keep is None:
            keep = np.ones((b, m), dtype=bool)
        return x, steps, keep

    def transmit(self, tokens: Value, keep: np.ndarray, ratios, draw: ChannelDraw | None) -> Value:
        """Codec + channel for a batch where each sample may use its own ratio."""
        b = tokens.shape[0]
        ratios = np.broadcast_to(np.asarray(ratios, dtype=float), (b,))
        unique = sorted(set(ratios.tolist()))
        if len(unique) == 1:
            return self._link(tokens, keep, unique[0], draw, np.arange(b))
        parts, order = [], []
        for r in unique:
            idx = np.flatnonzero(ratios == r)
            parts.append(self._link(dc.take(tokens, idx, axis=0), keep[idx], r, draw, idx))
            order.append(idx)
        inverse = np.argsort(np.concatenate(order))
        return dc.take(dc.concat(parts, axis=0), inverse, axis=0)

    def _link(self, tokens, keep, r, draw, idx) -> Value:
        block = encode_symbols(tokens, r, self.bank, keep)
        if draw is not None:
            block = channel_apply(block, _subset(draw, idx))
        return decode_symbols(block, r, self.bank)

    def decode(self, tokens: Value, keep: np.ndarray | None) -> Value:
        x = tokens
        for block in self.decoder_blocks():
            x = block(x, keep)
        return self.vit.head(x)

    def forward(self, images, alphas, ratios, draw: ChannelDraw | None,
                select: bool = True, hard: bool = False, gate_noise=None,
                straight_through: bool = False) -> ForwardResult:
        """Full pipeline on a batch. ``draw`` None means an ideal link."""
        tokens, steps, keep = self.encode(images, alphas, select=select, hard=hard, gate_noise=gate_noise,
                                          straight_through=straight_through)
        sent = transmitted_rows(keep)
        received = self.transmit(tokens, sent, ratios, draw)
        logits = self.decode(received, sent)
        b = tokens.shape[0]
        return ForwardResult(logits, steps, sent, np.broadcast_to(np.asarray(ratios, float), (b,)).copy())

    def backbone_logits(self, images, alphas=1.0, select: bool = False, hard: bool = True) -> Value:
        """Unsplit classifier (no codec, no channel), optionally with token selection."""
        tokens, _, keep = self.encode(images, alphas, select=select, hard=hard)
        return self.decode(tokens, keep if select else None)

    # single-sample path with physical token removal --------------------------

    def infer_sample(self, image, alpha: float, r: float, draw: ChannelDraw | None,
                     hard: bool = False) -> SampleResult:
        image = np.asarray(image, dtype=dc.DTYPE)[None]
        x = self.embed(image, alpha)
        x = dc.reshape(x, x.shape[1:])
        m = x.shape[0]
        rows = np.arange(m)
        mask = np.ones(m)
        retained = []
        for block, selector in zip(self.encoder_blocks(), self.selectors):
            budget_row = dc.take(x, [x.shape[0] - 1], axis=0)
            scaled, new_mask = apply_selection(
                dc.reshape(x, (1,) + x.shape), budget_row, mask[None], selector
            )
            alive = new_mask.data[0] > 0
            alive |= pinned_mask(alive.size)
            rows = rows[alive]
            source = x if hard else dc.reshape(scaled, x.shape)
            x = dc.take(source, np.flatnonzero(alive), axis=0)
            mask = new_mask.data[0][alive]
            retained.append(rows.copy())
            x = block(x)
        rows = rows[:-1]  # the budget row stays at the transmitter
        x = dc.take(x, np.arange(rows.size), axis=0)
        symbols = encode_symbols(x, r, self.bank)
        symbols.indices = rows
        received = symbols if draw is None else channel_apply(symbols, draw)
        y = decode_symbols(received, r, self.bank)
        for block in self.decoder_blocks():
            y = block(y)
        logits = self.vit.head(dc.reshape(y, (1,) + y.shape), class_row=-1)
        n_alpha = int(rows.size)
        rho = compression_ratio(n_alpha, self.bank[r].out_dim, self.config.input_size)
        return SampleResult(logits.data[0], retained, n_alpha, symbols, float(rho))


def transmitted_rows(keep: np.ndarray) -> np.ndarray:
    """Rows that go over the link: retained rows minus the trailing budget row."""
    sent = np.array(keep, dtype=bool)
    sent[..., -1] = False
    return sent


def _subset(draw: ChannelDraw, idx: np.ndarray) -> ChannelDraw:
    h = np.asarray(draw.h)
    var = np.asarray(draw.noise_var)
    return ChannelDraw(
        draw.mode,
        h[idx] if h.ndim == 1 else draw.h,
        var[idx] if var.ndim == 1 else draw.noise_var,
        draw.rng,
    )
