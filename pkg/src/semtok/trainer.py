"""Training and evaluation of the split model.

Training has up to three phases. The backbone phase fits the plain classifier
(budget row at alpha = 1, no selection, no codec, no channel). An optional
codec phase fits only the codec bank on an ideal link. The DJSCC phase then trains everything end to end with the penalized objective
``CE + lambda_s * B(s) + lambda_r * R``, a fresh budget alpha ~ U(0, 1] and
compression factor per sample, and the channel regime's SNR per sample.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .channel import RATIO_GRID, ChannelDraw, batch_channel, compression_ratio
from .checkpoint import load_arrays, save_arrays
from .data import Dataset
from .djscc import DJSCC
from .rng import stream
from .selection import (
    DEFAULT_EPSILON,
    budget_penalty,
    mean_mask,
    retained_fraction,
    leaky_retained_fraction,
    sparsity_regularizer,
)
from .vit import ModelConfig

log = logging.getLogger(__name__)

REGIMES = ("robust", "noiseless")
# What the budget penalty measures (the gradient is always the average mask's):
#   "soft"      the plain average mask value
#   "count"     the exact retained fraction
#   "annealed"  soft at first, moving linearly to count over the first
#               ``anneal_fraction`` of the end-to-end steps
#   "leaky"     the exact retained fraction, gradient of sigmoid((gate - threshold) / temperature)
BUDGET_ESTIMATES = ("soft", "count", "annealed", "leaky")
NOISE_SCHEDULES = ("constant", "linear")
# where the exact count in the budget estimate comes from while gate noise is on:
#   "noisy"  the masks of the noisy training pass
#   "clean"  a noiseless pass with hard masks, i.e. what inference keeps
COUNT_SOURCES = ("noisy", "clean")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 10
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lambda_s: float = 2.0
    lambda_r: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    regime: str = "robust"
    snr_low: float = -20.0
    snr_high: float = 20.0
    ratios: tuple[float, ...] = RATIO_GRID
    seed: int = 0
    clip_norm: float = 1.0
    freeze_backbone: bool = False
    budget_estimate: str = "count"
    anneal_fraction: float = 0.5
    temperature: float = 1.0
    gate_noise: float = 0.0  # scale of logistic noise on gate logits while fine-tuning
    noise_schedule: str = "constant"  # or "linear": decays to zero by the last step
    count_source: str = "clean"
    straight_through: bool = True  # forward kept rows unscaled, as at inference
    codec_warmup_epochs: int = 3  # codec-only epochs between the backbone and end-to-end phases

    def __post_init__(self):
        if self.budget_estimate not in BUDGET_ESTIMATES:
            raise ValueError(f"budget_estimate must be one of {BUDGET_ESTIMATES}")
        if self.gate_noise < 0:
            raise ValueError("gate_noise must be non-negative")
        if self.noise_schedule not in NOISE_SCHEDULES:
            raise ValueError(f"noise_schedule must be one of {NOISE_SCHEDULES}")
        if self.codec_warmup_epochs < 0:
            raise ValueError("codec_warmup_epochs must be non-negative")
        if self.count_source not in COUNT_SOURCES:
            raise ValueError(f"count_source must be one of {COUNT_SOURCES}")
        if not 0 < self.anneal_fraction <= 1:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise ValueError("penalty weights must be non-negative")
        if not self.snr_low < self.snr_high:
            raise ValueError("robust SNR range needs low < high")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch size and learning rate must be positive")


@dataclass(frozen=True)
class ChannelSpec:
    """Evaluation channel: ``mode`` in noiseless/awgn/slow_fading, SNR in dB."""

    mode: str = "awgn"
    snr_db: float | None = None

    @classmethod
    def parse(cls, text: str) -> ChannelSpec:
        """``"noiseless"``, ``"10"`` (AWGN dB) or ``"slow_fading:10"``."""
        text = str(text).strip()
        if text == "noiseless":
            return cls("noiseless")
        if ":" in text:
            mode, snr = text.split(":", 1)
            return cls(mode, float(snr))
        return cls("awgn", float(text))

    def draw(self, size: int, rng: np.random.Generator) -> ChannelDraw | None:
        if self.mode == "noiseless":
            return None
        return batch_channel(self.mode, np.full(size, self.snr_db), rng)


# sampling --------------------------------------------------------------------


def sample_budget(rng: np.random.Generator, size: int | None = None):
    """Uniform on (0, 1]."""
    return 1.0 - rng.random(size)


def sample_training_snr(regime: str, rng: np.random.Generator, size: int,
                        low: float = -20.0, high: float = 20.0) -> ChannelDraw | None:
    """Per-sample channel for a training batch; None is the identity link."""
    if regime == "noiseless":
        return None
    if regime == "robust":
        return batch_channel("awgn", rng.uniform(low, high, size), rng)
    raise ValueError(f"unknown regime {regime!r}")


# optimisation ------------------------------------------------------------------


class Adam:
    def __init__(self, params: list[dc.Value], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[dc.Value], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# loss --------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: dc.Value
    ce: float
    budget: float
    sparsity: float
    mean_masks: list[float]
    correct: int


def loss(model: DJSCC, images, labels, alphas, ratios, draw: ChannelDraw | None,
         lambda_s: float = 2.0, lambda_r: float = 1.0, epsilon: float = DEFAULT_EPSILON,
         count_weight: float = 0.0, temperature: float | None = None,
         gate_noise: np.ndarray | None = None, clean_count: bool = False,
         straight_through: bool = False) -> LossTerms:
    """Batch estimate of ``CE + lambda_s * B(s) + lambda_r * R``; penalties averaged over samples.

    ``count_weight`` blends the budget estimate from the average mask value
    (0) to the exact retained fraction (1); see :func:`retained_fraction`.
    With ``clean_count`` that fraction is taken from a noiseless hard-mask
    pass instead of the (noisy) training masks.
    """
    alphas = np.broadcast_to(np.asarray(alphas, dtype=float), (len(labels),))
    out = model.forward(images, alphas, ratios, draw, gate_noise=gate_noise, straight_through=straight_through)
    ce = dc.cross_entropy(out.logits, labels)
    if temperature is None:
        kept = [None] * len(out.masks)
        if clean_count and gate_noise is not None and count_weight > 0:
            with dc.no_grad():
                _, clean_steps, _ = model.encode(images, alphas, hard=True)
            kept = [step.mask.data > 0 for step in clean_steps]
        estimates = [retained_fraction(m, count_weight, k) for m, k in zip(out.masks, kept)]
    else:
        estimates = [leaky_retained_fraction(step, temperature) for step in out.steps]
    penalties = [budget_penalty(e, alphas, epsilon) for e in estimates]
    s = model.config.split
    budget_term = dc.mean(penalties[s - 1])
    sparsity_term = dc.mean(sparsity_regularizer(penalties, s))
    total = ce + budget_term * lambda_s + sparsity_term * lambda_r
    for name, term in (("cross-entropy", ce), ("budget", budget_term), ("sparsity", sparsity_term)):
        if not np.isfinite(term.data).all():
            raise TrainingDiverged(f"non-finite {name} term")
    correct = int(np.sum(out.logits.data.argmax(axis=1) == np.asarray(labels)))
    return LossTerms(
        total,
        float(ce.data),
        float(budget_term.data),
        float(sparsity_term.data),
        [float(m.data.mean()) for m in out.masks],
        correct,
    )


# checkpoints -------------------------------------------------------------------


def model_state(model: DJSCC, extra: dict | None = None) -> dict[str, np.ndarray]:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for key, value in model.config.to_dict().items():
        arrays[f"meta/config/{key}"] = np.asarray(float(value))
    arrays["meta/ratios"] = np.asarray(model.ratios, dtype=float)
    for key, value in (extra or {}).items():
        arrays[f"meta/{key}"] = np.asarray(value, dtype=float)
    return arrays


def save_model(path, model: DJSCC, extra: dict | None = None) -> Path:
    return save_arrays(path, model_state(model, extra))


def load_model(path) -> tuple[DJSCC, dict[str, np.ndarray]]:
    arrays = load_arrays(path)
    fields = {k.split("/", 2)[2]: int(v) for k, v in arrays.items() if k.startswith("meta/config/")}
    config = ModelConfig(**fields)
    model = DJSCC(config, tuple(arrays["meta/ratios"].tolist()), stream(0, "init"))
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    meta = {k[5:]: v for k, v in arrays.items() if k.startswith("meta/") and "config/" not in k}
    return model, meta


# training loop -----------------------------------------------------------------


METRIC_FIELDS = ("phase", "epoch", "step", "ce_loss", "budget_loss", "sparsity_loss")


@dataclass
class TrainResult:
    model: DJSCC
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    backbone_checkpoint: Path | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def count_weight(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.budget_estimate == "soft":
        return 0.0
    if config.budget_estimate == "count":
        return 1.0
    return min(1.0, step / max(1.0, config.anneal_fraction * total_steps))


def noise_scale(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.noise_schedule == "constant":
        return config.gate_noise
    return config.gate_noise * max(0.0, 1.0 - step / max(1, total_steps))


def metric_fields(split: int) -> tuple[str, ...]:
    return METRIC_FIELDS + tuple(f"mean_mask_b{i + 1}" for i in range(split)) + ("train_acc",)


def pretrain_backbone(model: DJSCC, dataset: Dataset, config: TrainConfig,
                      record: Callable[[dict], None]) -> int:
    """Plain classification with the budget row at alpha = 1; returns the step count."""
    s = model.config.split
    fields = metric_fields(s)
    shuffle = stream(config.seed, "shuffle", 0)
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    step = 0
    for epoch in range(config.pretrain_epochs):
        totals = np.zeros(2)
        for idx in _batches(len(dataset), config.batch_size, shuffle):
            images, labels = dataset.images[idx], dataset.labels[idx]
            model.zero_grad()
            with dc.Graph() as graph:
                logits = model.backbone_logits(images, 1.0, select=False)
                ce = dc.cross_entropy(logits, labels)
            if not np.isfinite(ce.data):
                raise TrainingDiverged("non-finite cross-entropy term")
            graph.backward(ce)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            step += 1
            totals += (float(ce.data) * len(idx), np.sum(logits.data.argmax(1) == labels))
        record(_row(fields, "backbone", epoch, step, totals[0] / len(dataset), 0.0, 0.0,
                    [1.0] * s, totals[1] / len(dataset)))
    return step


def warmup_codec(model: DJSCC, dataset: Dataset, config: TrainConfig,
                 record: Callable[[dict], None], step: int = 0) -> int:
    """Fit only the codec bank on an ideal link with every token kept.

    A freshly initialized codec between the two halves otherwise wipes out
    most of the pretrained accuracy before selection training starts.
    """
    s = model.config.split
    fields = metric_fields(s)
    shuffle = stream(config.seed, "shuffle", 2)
    ratio_rng = stream(config.seed, "budget", 3)
    params = model.bank.parameters()
    opt = Adam(params, lr=config.lr)
    for epoch in range(config.codec_warmup_epochs):
        totals = np.zeros(2)
        for idx in _batches(len(dataset), config.batch_size, shuffle):
            images, labels = dataset.images[idx], dataset.labels[idx]
            ratios = ratio_rng.choice(np.asarray(config.ratios), len(idx))
            model.zero_grad()
            with dc.Graph() as graph:
                logits = model.forward(images, 1.0, ratios, None, select=False).logits
                ce = dc.cross_entropy(logits, labels)
            if not np.isfinite(ce.data):
                raise TrainingDiverged("non-finite cross-entropy term")
            graph.backward(ce)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            step += 1
            totals += (float(ce.data) * len(idx), np.sum(logits.data.argmax(1) == labels))
        record(_row(fields, "codec", epoch, step, totals[0] / len(dataset), 0.0, 0.0,
                    [1.0] * s, totals[1] / len(dataset)))
    return step


def finetune(model: DJSCC, dataset: Dataset, config: TrainConfig,
             record: Callable[[dict], None], step: int = 0) -> int:
    """End-to-end training with selection, codec and channel."""
    s = model.config.split
    fields = metric_fields(s)
    shuffle = stream(config.seed, "shuffle", 1)
    budget_rng = stream(config.seed, "budget", 0)
    ratio_rng = stream(config.seed, "budget", 1)
    channel_rng = stream(config.seed, "channel")
    noise_rng = stream(config.seed, "budget", 2)
    params = model.parameters()
    if config.freeze_backbone:
        frozen = {id(p) for p in model.vit.parameters()}
        params = [p for p in params if id(p) not in frozen]
    opt = Adam(params, lr=config.lr)
    total_steps = config.epochs * -(-len(dataset) // config.batch_size)
    done = 0
    for epoch in range(config.epochs):
        sums = np.zeros(4 + s)
        for idx in _batches(len(dataset), config.batch_size, shuffle):
            images, labels = dataset.images[idx], dataset.labels[idx]
            alphas = sample_budget(budget_rng, len(idx))
            ratios = ratio_rng.choice(np.asarray(config.ratios), len(idx))
            draw = sample_training_snr(config.regime, channel_rng, len(idx),
                                       config.snr_low, config.snr_high)
            weight = count_weight(config, done, total_steps)
            scale = noise_scale(config, done, total_steps)
            done += 1
            noise = None
            if config.gate_noise > 0:
                noise = scale * noise_rng.logistic(size=(s, len(idx), model.config.num_tokens))
            model.zero_grad()
            with dc.Graph() as graph:
                terms = loss(model, images, labels, alphas, ratios, draw,
                             config.lambda_s, config.lambda_r, config.epsilon, weight,
                             config.temperature if config.budget_estimate == "leaky" else None,
                             noise, config.count_source == "clean", config.straight_through)
            graph.backward(terms.total)
            clip_grad_norm(params, config.clip_norm)
            opt.step()
            step += 1
            n = len(idx)
            sums += np.array([terms.ce * n, terms.budget * n, terms.sparsity * n, terms.correct]
                             + [m * n for m in terms.mean_masks])
        avg = sums / len(dataset)
        record(_row(fields, "djscc", epoch, step, avg[0], avg[1], avg[2], list(avg[4:]), avg[3]))
    return step


def train(model: DJSCC, dataset: Dataset, config: TrainConfig, out_dir=None,
          progress: Callable[[dict], None] | None = None, pretrained: bool = False) -> TrainResult:
    """Backbone phase (skipped when ``pretrained``), codec phase, then the end-to-end phase.

    With ``out_dir`` set, writes ``backbone.ckpt``, ``model.ckpt`` and
    ``metrics.csv``; on divergence a ``model.ckpt.failed`` snapshot is kept.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)

    def record(row: dict) -> None:
        result.history.append(row)
        if progress is not None:
            progress(row)

    try:
        step = 0
        if not pretrained:
            step = pretrain_backbone(model, dataset, config, record)
            if out is not None:
                result.backbone_checkpoint = save_model(out / "backbone.ckpt", model)
        step = warmup_codec(model, dataset, config, record, step)
        finetune(model, dataset, config, record, step)
    except (TrainingDiverged, FloatingPointError) as exc:
        if out is not None:
            save_model(out / "model.ckpt.failed", model, {"failed": 1.0})
            write_metrics(out / "metrics.csv", metric_fields(model.config.split), result.history)
        raise TrainingDiverged(f"training diverged: {exc}") from exc

    if out is not None:
        result.checkpoint = save_model(out / "model.ckpt", model)
        write_metrics(out / "metrics.csv", metric_fields(model.config.split), result.history)
    return result


def _row(fields, phase, epoch, step, ce, budget, sparsity, masks, acc) -> dict:
    values = [phase, epoch, step] + [float(v) for v in (ce, budget, sparsity, *masks, acc)]
    return dict(zip(fields, values))


def write_metrics(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


# evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    mean_rho: float
    mean_n_alpha: float
    retained_fraction: float
    per_sample_correct: np.ndarray = field(repr=False, default=None)
    per_sample_n_alpha: np.ndarray = field(repr=False, default=None)


def evaluate(model: DJSCC, dataset: Dataset, alpha: float, r: float,
             channel: ChannelSpec | None, rng: np.random.Generator,
             batch_size: int = 256, hard: bool = True) -> EvalResult:
    """Top-1 accuracy with discretized masks (zero-mask tokens removed)."""
    if r not in model.ratios:
        raise KeyError(f"compression factor {r} not in bank {model.ratios}")
    channel = channel or ChannelSpec("noiseless")
    correct, n_alpha = [], []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        out = model.forward(images, alpha, r, channel.draw(len(labels), rng), hard=hard)
        correct.append(out.logits.data.argmax(axis=1) == labels)
        n_alpha.append(out.n_alpha)
    correct = np.concatenate(correct)
    n_alpha = np.concatenate(n_alpha)
    o_r = model.bank[r].out_dim
    rho = compression_ratio(n_alpha, o_r, model.config.input_size)
    return EvalResult(
        float(correct.mean()),
        float(np.mean(rho)),
        float(n_alpha.mean()),
        # discretized final mask over all n + 1 rows, pinned rows included
        float((n_alpha.mean() + 1) / model.config.num_tokens),
        correct,
        n_alpha,
    )


@dataclass
class GridResult:
    accuracy: np.ndarray  # (|r|, |alpha|, |channels|)
    mean_n_alpha: np.ndarray  # (|alpha|,)


def evaluate_grid(model: DJSCC, dataset: Dataset, r_grid, alpha_grid, channels: list[ChannelSpec],
                  rng: np.random.Generator, batch_size: int = 256) -> GridResult:
    """Accuracy for every (r, alpha, channel) with discretized masks.

    The transmitter half runs once per alpha and batch; only the link and
    receiver are repeated per compression factor and channel.
    """
    from .djscc import transmitted_rows

    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    hits = np.zeros((len(r_grid), len(alpha_grid), len(channels)))
    n_alpha = np.zeros(len(alpha_grid))
    for j, alpha in enumerate(alpha_grid):
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            tokens, _, keep = model.encode(images, alpha, hard=True)
            sent = transmitted_rows(keep)
            n_alpha[j] += sent.sum()
            for i, r in enumerate(r_grid):
                for k, channel in enumerate(channels):
                    received = model.transmit(tokens, sent, r, channel.draw(len(labels), rng))
                    logits = model.decode(received, sent)
                    hits[i, j, k] += np.sum(logits.data.argmax(axis=1) == labels)
    return GridResult(hits / len(dataset), n_alpha / len(dataset))


def mean_retained(model: DJSCC, dataset: Dataset, alpha: float, batch_size: int = 256) -> float:
    """Average number of transmitted rows (retained patches plus class token)."""
    from .djscc import transmitted_rows

    total = 0
    for start in range(0, len(dataset), batch_size):
        _, _, keep = model.encode(dataset.images[start : start + batch_size], alpha, hard=True)
        total += transmitted_rows(keep).sum()
    return total / len(dataset)


def backbone_accuracy(model: DJSCC, dataset: Dataset, batch_size: int = 256) -> float:
    hits = 0
    for start in range(0, len(dataset), batch_size):
        logits = model.backbone_logits(dataset.images[start : start + batch_size], 1.0, select=False)
        hits += int(np.sum(logits.data.argmax(1) == dataset.labels[start : start + batch_size]))
    return hits / len(dataset)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
