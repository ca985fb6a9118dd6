"""End-to-end experiment flow and report files.

Stages run in order: gen-data, pretrain, finetune (one model per training
regime), eval, build-proxy, tune, run-controller, baselines. Every random
draw comes from a stream keyed on the run seed and a per-stage namespace,
so a rerun with the same configuration rewrites every CSV byte for byte.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import baselines
from .config import RunConfig, dump_config
from .controller import (
    ControllerParams,
    ProxyTable,
    SNRProcess,
    build_proxy,
    feasible,
    run_controller,
    tune_hyperparams,
)
from .data import Dataset, generate, read_raster, write_raster
from .djscc import DJSCC
from .rng import stream
from .trainer import (
    ChannelSpec,
    evaluate_grid,
    load_model,
    metric_fields,
    pretrain_backbone,
    save_model,
    train,
    write_metrics,
)

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("regime", "r", "alpha", "snr_db", "rho", "mean_n_alpha", "accuracy")
TUNE_FIELDS = ("rho_th", "feasible", "V", "mu", "mean_rho", "mean_accuracy")
MASK_FIELDS = ("sample_id", "alpha", "block_index", "token_index", "mask_value", "retained")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class InfeasibleConstraint(RuntimeError):
    pass


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# stages ---------------------------------------------------------------------------


def gen_data(config: RunConfig) -> tuple[Dataset, Dataset]:
    train_set, test_set = generate(config.data)
    out = config.paths.data
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    write_raster(out / "train.raster", train_set)
    write_raster(out / "test.raster", test_set)
    return train_set, test_set


def load_data(config: RunConfig) -> tuple[Dataset, Dataset]:
    out = config.paths.data
    if (out / "train.raster").exists() and (out / "test.raster").exists():
        return read_raster(out / "train.raster"), read_raster(out / "test.raster")
    return gen_data(config)


def new_model(config: RunConfig) -> DJSCC:
    return DJSCC(config.model, config.train.ratios, stream(config.seed, "init"))


def pretrain(config: RunConfig, train_set: Dataset) -> Path:
    """Shared backbone for every regime; also the digital baselines' classifier."""
    model = new_model(config)
    history: list[dict] = []
    pretrain_backbone(model, train_set, config.train, history.append)
    path = save_model(config.paths.backbone, model)
    write_metrics(path.parent / "metrics.csv", metric_fields(config.model.split), history)
    return path


def finetune_regime(config: RunConfig, regime: str, train_set: Dataset) -> Path:
    model, _ = load_model(config.paths.backbone)
    result = train(model, train_set, replace(config.train, regime=regime),
                   config.paths.regime(regime), pretrained=True)
    return result.checkpoint


def evaluate_cells(config: RunConfig, test_set: Dataset) -> list[tuple]:
    """One summary row per (regime, r, alpha, SNR) over AWGN."""
    rows = []
    channels = [ChannelSpec("awgn", float(s)) for s in config.eval.snrs]
    for k, regime in enumerate(config.regimes):
        model, _ = load_model(config.paths.regime(regime) / "model.ckpt")
        grid = evaluate_grid(model, test_set, model.ratios, config.eval.alpha_grid, channels,
                             stream(config.seed, "eval", k))
        p = config.model.input_size
        for i, r in enumerate(model.ratios):
            o_r = model.bank[r].out_dim
            for j, alpha in enumerate(config.eval.alpha_grid):
                for c, snr in enumerate(config.eval.snrs):
                    rho = grid.mean_n_alpha[j] * o_r / p
                    rows.append((regime, float(r), float(alpha), float(snr), float(rho),
                                 float(grid.mean_n_alpha[j]), float(grid.accuracy[i, j, c])))
    return rows


def proxy(config: RunConfig, train_set: Dataset, test_set: Dataset) -> ProxyTable:
    cc = config.controller
    model, _ = load_model(config.paths.regime(cc.regime) / "model.ckpt")
    table = build_proxy(model, test_set, model.ratios, cc.alpha_grid, cc.snr_bins,
                        stream(config.seed, "eval", 100), count_dataset=train_set)
    table.to_csv(config.paths.reports / "proxy.csv")
    return table


def snr_process(config: RunConfig) -> SNRProcess:
    return SNRProcess(config.controller.snr_mean, config.controller.snr_std)


def tune(config: RunConfig, table: ProxyTable) -> list[tuple]:
    cc = config.controller
    rows = []
    for rho_th in cc.rho_th_grid:
        if not feasible(table, rho_th):
            rows.append((float(rho_th), 0, "", "", "", ""))
            continue
        res = tune_hyperparams(table, rho_th, snr_process(config), cc.V_grid, cc.mu_grid,
                               cc.horizon, cc.window, cc.runs, seed=config.seed)
        rows.append((float(rho_th), int(res.feasible), res.V, res.mu, res.mean_rho, res.mean_accuracy))
    write_rows(config.paths.reports / "tune.csv", TUNE_FIELDS, rows)
    if not any(row[1] for row in rows):
        raise InfeasibleConstraint(f"no rho_th in {list(cc.rho_th_grid)} admits a feasible cell")
    return rows


def read_tuned(config: RunConfig) -> list[tuple]:
    """Rows of ``tune.csv`` as written by :func:`tune`."""
    out = []
    for row in read_rows(config.paths.reports / "tune.csv"):
        ok = int(row["feasible"])
        out.append((float(row["rho_th"]), ok,
                    *(float(row[k]) if ok else "" for k in TUNE_FIELDS[2:])))
    return out


def load_proxy(config: RunConfig) -> ProxyTable:
    return ProxyTable.from_csv(config.paths.reports / "proxy.csv", config.model.dim, config.model.input_size)


def run_tuned(config: RunConfig, table: ProxyTable, tuned: list[tuple]) -> list[Path]:
    cc = config.controller
    paths = []
    for k, (rho_th, ok, V, mu, *_rest) in enumerate(tuned):
        if not ok:
            continue
        trace = run_controller(table, snr_process(config), ControllerParams(V, mu, rho_th),
                               cc.horizon, stream(config.seed, "controller", 1000 + k))
        paths.append(trace.to_csv(config.paths.reports / f"trace_rho{rho_th:g}.csv"))
    return paths


def digital_baselines(config: RunConfig, test_set: Dataset) -> Path:
    model, _ = load_model(config.paths.backbone)

    def classify(images):
        return model.backbone_logits(images, 1.0, select=False).data

    bc = config.baseline
    points = baselines.sweep(test_set, bc.rhos, bc.snrs, classify, bc.schemes)
    return baselines.write_sweep(config.paths.reports / "baselines.csv", points)


# mask export ------------------------------------------------------------------------


@dataclass
class MaskRecord:
    sample_id: int
    alpha: float
    block_index: int  # 1-based adaptive block
    mask: np.ndarray  # soft mask value per patch token
    retained: np.ndarray  # bool per patch token

    @property
    def discarded(self) -> int:
        return int((~self.retained).sum())


def export_masks(model: DJSCC, images: np.ndarray, alphas) -> list[MaskRecord]:
    """Per (image, alpha, adaptive block) retained flags for the patch tokens."""
    images = np.asarray(images, dtype=float)
    n_patch = model.config.num_patches
    records = []
    for alpha in alphas:
        _, steps, _ = model.encode(images, alpha, hard=True)
        for i in range(len(images)):
            for block, step in enumerate(steps, start=1):
                values = step.mask.data[i, :n_patch].copy()
                records.append(MaskRecord(i, float(alpha), block, values, values > 0))
    records.sort(key=lambda rec: (rec.sample_id, rec.alpha, rec.block_index))
    return records


def write_masks(path, records: list[MaskRecord]) -> Path:
    rows = (
        (rec.sample_id, rec.alpha, rec.block_index, j, float(v), int(k))
        for rec in records
        for j, (v, k) in enumerate(zip(rec.mask, rec.retained))
    )
    return write_rows(path, MASK_FIELDS, rows)


# whole run --------------------------------------------------------------------------


def run_pipeline(config: RunConfig) -> dict[str, Path]:
    """Run every stage; any failure is re-raised as :class:`StageError` naming the stage."""
    root = config.paths.root
    root.mkdir(parents=True, exist_ok=True)
    reports = config.paths.reports
    reports.mkdir(parents=True, exist_ok=True)
    dump_config(config, root / "config.yaml")
    out: dict[str, Path] = {}

    def stage(name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(*args)
        except InfeasibleConstraint:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc

    train_set, test_set = stage("gen-data", gen_data, config)
    out["backbone"] = stage("pretrain", pretrain, config, train_set)
    for regime in config.regimes:
        out[f"model_{regime}"] = stage(f"finetune-{regime}", finetune_regime, config, regime, train_set)
    rows = stage("eval", evaluate_cells, config, test_set)
    out["summary"] = write_rows(reports / "summary.csv", SUMMARY_FIELDS, rows)
    table = stage("build-proxy", proxy, config, train_set, test_set)
    out["proxy"] = reports / "proxy.csv"
    tuned = stage("tune", tune, config, table)
    out["tune"] = reports / "tune.csv"
    for path in stage("run-controller", run_tuned, config, table, tuned):
        out[path.stem] = path
    out["baselines"] = stage("baselines", digital_baselines, config, test_set)
    return out
