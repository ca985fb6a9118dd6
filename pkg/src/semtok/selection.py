"""Budget-conditioned token selection.

A budget token ``b0 = alpha * b_h + (1 - alpha) * b_l`` rides along as the
last row of the token matrix. Before each adaptive block a threshold model
reads the current budget row and a gate model scores every token; the
mask is ``relu(gate - threshold) * previous_mask`` with the class and budget
rows pinned to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Value
from .layers import Linear, Module, param

GATE_INIT_BIAS = 4.0
THRESHOLD_INIT_BIAS = -4.0
DEFAULT_EPSILON = 0.05
# unit scale so the two endpoints differ enough for alpha to steer the thresholds
BUDGET_INIT_STD = 1.0


class BudgetPair(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.low = param(rng.normal(0.0, BUDGET_INIT_STD, size=dim))
        self.high = param(rng.normal(0.0, BUDGET_INIT_STD, size=dim))


def _check_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=dc.DTYPE)
    if np.any(a <= 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError(f"budget alpha must lie in (0, 1], got {alpha}")
    return a


def make_budget_token(alpha, pair: BudgetPair) -> Value:
    """Convex mix of the two budget tokens. Vector ``alpha`` gives one row per sample."""
    a = _check_alpha(alpha)
    if a.ndim == 0:
        return pair.high * float(a) + pair.low * (1.0 - float(a))
    a = a.reshape(-1, 1)
    return dc.mul(pair.high, a) + dc.mul(pair.low, 1.0 - a)


@dataclass(frozen=True)
class BudgetSpec:
    alpha: float
    epsilon: float = DEFAULT_EPSILON
    lambda_s: float = 2.0
    lambda_r: float = 1.0

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise ValueError("penalty weights must be non-negative")


class Selector(Module):
    """Gate and threshold models for one adaptive block (linear + sigmoid each)."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.gate = Linear(dim, 1, rng)
        self.threshold = Linear(dim, 1, rng)
        self.gate.weight.data[:] = 0.0
        self.gate.bias.data[:] = GATE_INIT_BIAS
        self.threshold.weight.data[:] = 0.0
        self.threshold.bias.data[:] = THRESHOLD_INIT_BIAS

    def gates(self, tokens, noise=None) -> Value:
        """Per-token gate; ``noise`` (same shape as the output) is added to the logits."""
        logits = self.gate(tokens)
        logits = dc.reshape(logits, logits.shape[:-1])
        if noise is not None:
            logits = logits + noise
        return dc.sigmoid(logits)

    def thresholds(self, budget_rows) -> Value:
        return dc.sigmoid(self.threshold(budget_rows))


def pinned_mask(num_tokens: int) -> np.ndarray:
    """Boolean vector marking the class and budget rows (the last two)."""
    pinned = np.zeros(num_tokens, dtype=bool)
    pinned[-2:] = True
    return pinned


@dataclass
class SelectionStep:
    tokens: Value  # rows scaled by the new mask
    mask: Value  # (B, m)
    gates: Value  # (B, m)
    thresholds: Value  # (B, 1)
    prev_alive: np.ndarray  # (B, m) bool, rows with a nonzero previous mask


def selection_step(tokens, budget_rows, prev_mask, selector: Selector, gate_noise=None) -> SelectionStep:
    """:func:`apply_selection` that also keeps the gate and threshold outputs.

    ``gate_noise`` (B, m) perturbs the gate logits; training uses it, inference does not.
    """
    tokens = dc._wrap(tokens)
    prev_mask = dc._wrap(prev_mask)
    if tokens.ndim != 3 or prev_mask.shape != tokens.shape[:2]:
        raise ShapeError(f"apply_selection: tokens {tokens.shape}, previous mask {prev_mask.shape}")
    m = tokens.shape[1]
    pinned = pinned_mask(m)
    selectable = (~pinned).astype(dc.DTYPE)
    gates = selector.gates(tokens, gate_noise)  # (B, m)
    thresholds = selector.thresholds(budget_rows)  # (B, 1)
    mask = dc.relu(gates - thresholds) * prev_mask
    mask = mask * selectable + pinned.astype(dc.DTYPE)
    scaled = tokens * dc.reshape(mask, mask.shape + (1,))
    return SelectionStep(scaled, mask, gates, thresholds, prev_mask.data > 0)


def apply_selection(tokens, budget_rows, prev_mask, selector: Selector):
    """One selection step on a batch.

    ``tokens`` is (B, m, d), ``budget_rows`` (B, d) and ``prev_mask`` (B, m),
    a Value or array. Returns the row-scaled tokens and the new mask.
    """
    step = selection_step(tokens, budget_rows, prev_mask, selector)
    return step.tokens, step.mask


def mean_mask(mask) -> Value:
    """Average over all rows including the pinned ones; (B, m) -> (B,)."""
    mask = dc._wrap(mask)
    return dc.mean(mask, axis=-1)


def retained_fraction(mask, weight: float = 1.0, kept: np.ndarray | None = None) -> Value:
    """Average mask value moved ``weight`` of the way to the exact retained fraction.

    The gradient is always that of :func:`mean_mask` (a straight-through
    estimate). ``weight=0`` is the plain average mask value, ``weight=1``
    counts exactly the rows that survive discretization, pinned rows included.
    ``kept`` replaces the rows counted as surviving (e.g. from a noiseless pass).
    """
    mask = dc._wrap(mask)
    soft = mean_mask(mask)
    if weight == 0:
        return soft
    kept = mask.data > 0 if kept is None else np.asarray(kept, dtype=bool)
    hard = (kept | pinned_mask(mask.shape[-1])).mean(axis=-1)
    return soft + weight * (hard - soft.data)


def leaky_retained_fraction(step: SelectionStep, temperature: float) -> Value:
    """Exact retained fraction whose gradient also reaches discarded rows.

    The value matches :func:`retained_fraction`. The gradient is that of
    ``mean(sigmoid((gate - threshold) / temperature))`` over the rows that
    survived the previous block, so a row cut by a too-high threshold can
    be brought back when the budget asks for more rows.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    m = step.mask.shape[-1]
    pinned = pinned_mask(m)
    weight = (step.prev_alive & ~pinned).astype(dc.DTYPE)
    smooth = dc.sigmoid((step.gates - step.thresholds) * (1.0 / temperature))
    soft = dc.mean(smooth * weight, axis=-1) + pinned.sum() / m
    hard = ((step.mask.data > 0) | pinned).mean(axis=-1)
    return soft + (hard - soft.data)


def budget_penalty(mean_value, alpha, epsilon: float = DEFAULT_EPSILON) -> Value:
    """``relu(|mean - alpha| - epsilon)``, elementwise over samples."""
    alpha = np.asarray(alpha, dtype=dc.DTYPE)
    return dc.relu(dc.absolute(dc.sub(mean_value, alpha)) - epsilon)


def sparsity_regularizer(penalties, s: int):
    """Sum of the per-block penalties for blocks 2..s divided by ``s``.

    ``penalties`` holds B(1)..B(s) in block order; B(1) is ignored.
    """
    if s < 2:
        return 0.0
    if len(penalties) < s:
        raise ValueError(f"need penalties for blocks 1..{s}, got {len(penalties)}")
    total = penalties[1]
    for p in penalties[2:s]:
        total = total + p
    return total * (1.0 / s)


def discretize_mask(mask) -> np.ndarray:
    """Indices of rows to keep: positive mask entries plus the pinned rows."""
    m = np.asarray(mask.data if isinstance(mask, Value) else mask)
    keep = (m > 0) | pinned_mask(m.shape[-1])
    return np.flatnonzero(keep)
