"""Acceptance criteria 1-11, one PASS/FAIL line each in the terminal summary.

Criteria 5, 6, 7 and 11 use reference-profile models trained once per
session (cached between sessions, see ``conftest.reference_runs``).
"""

import time

import numpy as np
import pytest

from semtok import baselines
from semtok import diffcore as dc
from semtok import pipeline as pl
from semtok.channel import (
    RATIO_GRID,
    ChannelDraw,
    CodecBank,
    SymbolBlock,
    channel_apply,
    draw_channel,
    encode_symbols,
)
from semtok.controller import (
    ControllerParams,
    RHO_TH_GRID,
    SNRProcess,
    build_proxy,
    feasible,
    per_slot_argmin,
    run_controller,
    tune_hyperparams,
)
from semtok.djscc import DJSCC
from semtok.rng import stream
from semtok.selection import pinned_mask
from semtok.trainer import ChannelSpec, evaluate, evaluate_grid, load_model, loss
from semtok.vit import ModelConfig

from conftest import SEEDS
from test_controller import brute_force, random_table

TOY = ModelConfig(height=8, width=8, patch=4, dim=8, heads=2, head_dim_k=4, head_dim_v=4,
                  depth=3, split=2, ffn_dim=16)
FD_STEP, FD_TOL = 1e-5, 1e-4


def record(report, k, ok, detail):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    report[k] = line
    print(line)
    assert ok, line


def load(config, regime):
    return load_model(config.paths.regime(regime) / "model.ckpt")[0]


@pytest.fixture(scope="module")
def datasets(reference_runs):
    return {seed: pl.load_data(cfg) for seed, (cfg, _) in reference_runs.items()}


# 1 -----------------------------------------------------------------------------------


def _primitive_cases(rng):
    labels = np.array([0, 2, 1])
    away = lambda s: np.where(np.abs(x := rng.normal(size=s)) < 1e-2, 0.5, x)  # noqa: E731
    return {
        "add": ([away((3, 4)), away((4,))], lambda a, b: dc.add(a, b)),
        "sub": ([away((3, 4)), away((3, 1))], lambda a, b: dc.sub(a, b)),
        "mul": ([away((3, 4)), away((3, 4))], lambda a, b: dc.mul(a, b)),
        "power": ([np.abs(away((3, 4))) + 0.5], lambda a: dc.power(a, 1.5)),
        "relu": ([away((3, 5))], dc.relu),
        "absolute": ([away((3, 5))], dc.absolute),
        "sigmoid": ([away((3, 5))], dc.sigmoid),
        "gelu": ([away((3, 5))], dc.gelu),
        "matmul": ([away((2, 3, 4)), away((4, 2))], dc.matmul),
        "sum": ([away((3, 5))], lambda a: dc.sum(a, axis=0)),
        "mean": ([away((3, 5))], lambda a: dc.mean(a, axis=-1)),
        "softmax": ([away((3, 5))], lambda a: dc.softmax(a, axis=-1)),
        "layer_norm": ([away((3, 6)), away((6,)), away((6,))], dc.layer_norm),
        "cross_entropy": ([away((3, 4))], lambda a: dc.cross_entropy(a, labels)),
        "concat": ([away((2, 3)), away((4, 3))], lambda a, b: dc.concat([a, b], axis=-2)),
        "reshape": ([away((3, 4))], lambda a: dc.reshape(a, (2, 6))),
        "transpose": ([away((2, 3, 4))], lambda a: dc.transpose(a, (2, 0, 1))),
        "take": ([away((4, 3))], lambda a: dc.take(a, [3, 1, 1], axis=0)),
        "take_rows": ([away((2, 4, 3))], lambda a: dc.take_rows(a, [[0, 2], [3, 3]])),
    }


def test_criterion_01_gradient_suite(acceptance_report):
    rng = np.random.default_rng(0)
    failures, worst = [], 0.0
    for name, (arrays, op) in _primitive_cases(rng).items():
        proj = np.random.default_rng(1).normal(size=op(*[dc.Value(a) for a in arrays]).shape)
        values = [dc.Value(a) for a in arrays]
        res = dc.finite_difference_check(lambda *v: dc.sum(op(*v) * proj), values, FD_STEP, FD_TOL)
        worst = max(worst, res.max_rel_error)
        if not res.passed:
            failures.append(name)

    model = DJSCC(TOY, (0.25, 0.5), np.random.default_rng(2))
    r = np.random.default_rng(3)
    images, labels = r.random((4, 3, 8, 8)), r.integers(0, 10, 4)
    alphas = np.array([0.2, 0.5, 0.3, 0.7])
    draw = ChannelDraw("slow_fading", np.array([1.0, 0.5 + 0.5j, -0.3j, 0.8]), np.zeros(4))
    params = model.parameters()

    def full(*_):
        return loss(model, images, labels, alphas, 0.5, draw).total

    res = dc.finite_difference_check(full, params, FD_STEP, FD_TOL)
    worst = max(worst, res.max_rel_error)
    if not res.passed:
        failures.append("full loss")
    n_params = sum(p.data.size for p in params)
    record(acceptance_report, 1, not failures,
           f"gradient suite: 19 primitives + full loss ({n_params} params, 2 adaptive blocks); "
           f"max rel err {worst:.2e} (tol {FD_TOL:g}){'; failed ' + ', '.join(failures) if failures else ''}")


# 2 -----------------------------------------------------------------------------------


def test_criterion_02_mask_algebra(acceptance_report):
    rng = np.random.default_rng(10)
    cfg = ModelConfig(height=8, width=8, patch=2, dim=8, heads=2, head_dim_k=4, head_dim_v=4,
                      depth=4, split=3, ffn_dim=16)
    violations = 0
    passes = 0
    for i in range(1000):
        if i % 50 == 0:
            model = DJSCC(cfg, (0.5,), np.random.default_rng(i))
            for sel in model.selectors:  # push gates across the threshold so masks vary
                sel.gate.weight.data[:] = rng.normal(0, 1.5, sel.gate.weight.data.shape)
                sel.gate.bias.data[:] = rng.normal(0, 1)
                sel.threshold.bias.data[:] = rng.normal(0, 1)
        images = rng.random((1, 3, 8, 8))
        alpha = float(rng.uniform(0.01, 1.0))
        _, steps, _ = model.encode(images, alpha)
        prev = np.ones(cfg.num_tokens)
        pinned = pinned_mask(cfg.num_tokens)
        for step in steps:
            m = step.mask.data[0]
            ok = (np.all(m <= prev) and np.all(m[prev == 0] == 0) and np.all(m[pinned] == 1.0)
                  and np.all(m >= 0))
            violations += not ok
            prev = m
        passes += 1
    record(acceptance_report, 2, violations == 0,
           f"mask algebra: {passes} forward passes x {cfg.split} blocks, {violations} violations "
           f"(monotone, zero-absorbing, pinned rows exactly 1)")


# 3 -----------------------------------------------------------------------------------


def test_criterion_03_power_constraint(acceptance_report):
    rng = np.random.default_rng(20)
    bank = CodecBank(32, RATIO_GRID, np.random.default_rng(21))
    worst, blocks = 0.0, 0
    for _ in range(200):
        r = float(rng.choice(RATIO_GRID))
        b, m = int(rng.integers(1, 5)), int(rng.integers(2, 18))
        keep = rng.random((b, m)) < rng.uniform(0.1, 1.0)
        keep[:, -1] = True
        block = encode_symbols(rng.normal(0, rng.uniform(0.01, 10), (b, m, 32)), r, bank, keep)
        s = block.real.data ** 2 + block.imag.data ** 2
        q = keep.sum(1) * block.real.shape[-1]
        worst = max(worst, float(np.max(np.abs(s.sum(axis=(1, 2)) / q - 1))))
        blocks += b
    model = DJSCC(ModelConfig(), RATIO_GRID, np.random.default_rng(22))
    img = rng.random((3, 32, 32))
    for r in RATIO_GRID:
        sym = model.infer_sample(img, 0.5, r, None).symbols.complex()
        worst = max(worst, abs(np.mean(np.abs(sym) ** 2) - 1))
        blocks += 1
    x = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    out = channel_apply(SymbolBlock(dc.Value(x.real), dc.Value(x.imag), 0.5, 4), draw_channel("noiseless"))
    identity = np.array_equal(out.complex(), x)
    record(acceptance_report, 3, worst < 1e-9 and identity,
           f"power constraint: {blocks} blocks, max |P-1| = {worst:.1e} (< 1e-9); noiseless identity exact: {identity}")


# 4 -----------------------------------------------------------------------------------


def test_criterion_04_channel_statistics(acceptance_report):
    zeros = np.zeros((1000, 1000))
    draw = draw_channel("awgn", 10.0, np.random.default_rng(30))
    out = channel_apply(SymbolBlock(dc.Value(zeros), dc.Value(zeros.copy()), 0.5, 1000), draw).complex()
    var = float(np.mean(np.abs(out) ** 2))
    rel = abs(var / float(draw.noise_var) - 1)
    h_exact = draw.h == 1 and all(draw_channel("awgn", s, np.random.default_rng(s + 40)).h == 1
                                  for s in range(-20, 21, 5))
    record(acceptance_report, 4, rel < 0.01 and h_exact,
           f"channel statistics: noise variance {var:.5f} vs {float(draw.noise_var):.5f} over 1e6 symbols "
           f"(rel err {rel:.2%} < 1%); awgn h == 1 exactly: {h_exact}")


# 5 -----------------------------------------------------------------------------------


def test_criterion_05_budget_adherence(acceptance_report, reference_runs, datasets):
    config, seconds = reference_runs[0]
    model = load(config, "robust")
    _, test_set = datasets[0]
    eps = config.train.epsilon
    parts, ok = [], seconds <= 30 * 60
    for alpha in (0.25, 0.5, 0.75):
        res = evaluate(model, test_set, alpha, RATIO_GRID[-1], None, stream(0, "eval", 5))
        inside = abs(res.retained_fraction - alpha) <= eps + 0.10
        ok &= inside
        parts.append(f"a={alpha}: {res.retained_fraction:.3f}{'' if inside else ' (out)'}")
    record(acceptance_report, 5, ok,
           f"budget adherence (band a +/- {eps + 0.10:.2f}): " + ", ".join(parts)
           + f"; training {seconds / 60:.1f} min (<= 30)")


# 6 -----------------------------------------------------------------------------------


def test_criterion_06_robustness_ordering(acceptance_report, reference_runs, datasets):
    acc = {"robust": [], "noiseless": []}
    for seed, (config, _) in reference_runs.items():
        _, test_set = datasets[seed]
        for regime in acc:
            grid = evaluate_grid(load(config, regime), test_set, RATIO_GRID, config.eval.alpha_grid,
                                 [ChannelSpec("awgn", -10.0)], stream(seed, "eval", 6))
            acc[regime].append(float(grid.accuracy.mean()))
    robust, noiseless = np.mean(acc["robust"]), np.mean(acc["noiseless"])
    record(acceptance_report, 6, robust > noiseless,
           f"robustness at -10 dB over {len(SEEDS)} seeds: robust {robust:.3f} vs noiseless {noiseless:.3f} "
           f"(per seed {np.round(acc['robust'], 3).tolist()} vs {np.round(acc['noiseless'], 3).tolist()})")


# 7 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def proxy_table(reference_runs, datasets):
    config, _ = reference_runs[0]
    train_set, test_set = datasets[0]
    cc = config.controller
    return build_proxy(load(config, cc.regime), test_set, RATIO_GRID, cc.alpha_grid, cc.snr_bins,
                       stream(0, "eval", 100), count_dataset=train_set)


def test_criterion_07_controller_stability(acceptance_report, proxy_table):
    process = SNRProcess(10.0, 2.5)
    parts, ok, slowest = [], True, 0.0
    for k, rho_th in enumerate(RHO_TH_GRID):
        if not feasible(proxy_table, rho_th):
            parts.append(f"{rho_th:g}: no feasible cell")
            continue
        tuned = tune_hyperparams(proxy_table, rho_th, process, seed=0)
        start = time.perf_counter()
        trace = run_controller(proxy_table, process, ControllerParams(tuned.V, tuned.mu, rho_th),
                               100_000, stream(0, "controller", 500 + k))
        slowest = max(slowest, time.perf_counter() - start)
        window, drift = trace.window_rho(1000), trace.Z[-1] / len(trace)
        good = window <= 1.05 * rho_th and drift <= 0.01 * tuned.mu
        ok &= good
        parts.append(f"{rho_th:g}: rho {window:.5f}, Z/T {drift:.1e} (V={tuned.V:g}, mu={tuned.mu:g})"
                     + ("" if good else " FAIL"))
    record(acceptance_report, 7, ok and slowest < 60,
           "controller T=1e5, SNR~N(10,2.5): " + "; ".join(parts) + f"; slowest run {slowest:.1f} s (< 60)")


# 8 -----------------------------------------------------------------------------------


def test_criterion_08_argmin_oracle(acceptance_report):
    rng = np.random.default_rng(80)
    mismatches = 0
    for i in range(1000):
        table = random_table(rng, discrete=i % 2 == 0)
        Z = float(rng.choice([0.0, 1.0, 10.0, rng.uniform(0, 100)]))
        V = float(rng.choice([1.0, 10.0, rng.uniform(0.1, 100)]))
        snr = float(rng.uniform(-30, 30))
        mismatches += per_slot_argmin(table, Z, V, snr) != brute_force(table, Z, V, snr)
    record(acceptance_report, 8, mismatches == 0,
           f"argmin oracle: 1000 random instances (half with exact ties), {mismatches} mismatches")


# 9 -----------------------------------------------------------------------------------


def test_criterion_09_baseline_arithmetic(acceptance_report):
    cap = baselines.capacity_bits(1000, snr_linear=15)
    side, fail = baselines.resize_side(4000), baselines.resize_side(23)
    rng = np.random.default_rng(90)
    over = 0
    for _ in range(500):
        b = float(rng.uniform(0, 4000))
        p = baselines.codec_quality_fit(rng.random((3, 8, 8)), b, baselines.QuantCodec())
        over += p is not None and p.bits > b
    ok = cap == 4000 and side == 12 and fail is None and over == 0
    record(acceptance_report, 9, ok,
           f"baseline arithmetic: capacity {cap:g} bits, resize_side(4000) = {side}, "
           f"resize_side(23) = {fail}, over-budget codec payloads {over}/500")


# 10 ----------------------------------------------------------------------------------


def test_criterion_10_determinism(acceptance_report, tmp_path):
    from semtok.config import load_config

    files = []
    for run in ("a", "b"):
        cfg = load_config(None, [f"out_dir={tmp_path / run}"], profile="smoke")
        pl.run_pipeline(cfg)
        files.append({str(p.relative_to(tmp_path / run)): p.read_bytes()
                      for p in sorted((tmp_path / run).rglob("*.csv"))})
    same = files[0].keys() == files[1].keys() and all(files[0][k] == files[1][k] for k in files[0])
    record(acceptance_report, 10, same,
           f"determinism: full pipeline (smoke profile) run twice, {len(files[0])} CSVs byte-identical: {same}")


# 11 ----------------------------------------------------------------------------------


def _envelope(points, grid):
    """Best accuracy among points with ratio at most each grid value."""
    out = []
    for rho in grid:
        accs = [a for r, a in points if r <= rho]
        out.append(max(accs) if accs else 0.0)
    return np.array(out)


def test_criterion_11_tradeoff_shape(acceptance_report, reference_runs, datasets):
    snr = 10.0
    rhos = np.array(sorted(reference_runs[0][0].baseline.rhos))
    proposal, digital = [], []
    for seed, (config, _) in reference_runs.items():
        _, test_set = datasets[seed]
        model = load(config, "robust")
        grid = evaluate_grid(model, test_set, RATIO_GRID, config.controller.alpha_grid,
                             [ChannelSpec("awgn", snr)], stream(seed, "eval", 11))
        p = config.model.input_size
        points = [(grid.mean_n_alpha[j] * model.bank[r].out_dim / p, grid.accuracy[i, j, 0])
                  for i, r in enumerate(RATIO_GRID) for j in range(len(config.controller.alpha_grid))]
        proposal.append(_envelope(points, rhos))
        backbone, _ = load_model(config.paths.backbone)
        classify = lambda x, m=backbone: m.backbone_logits(x, 1.0, select=False).data  # noqa: E731
        sweep = baselines.sweep(test_set, rhos, [snr], classify)
        best = [max(pt.accuracy for pt in sweep if pt.rho == rho) for rho in rhos]
        digital.append(np.maximum.accumulate(best))
    prop, dig = np.mean(proposal, axis=0), np.mean(digital, axis=0)
    saturation = rhos[int(np.argmax(dig >= dig.max() - 1e-12))]
    below = rhos < saturation
    ok = bool(np.all(prop[below] >= dig[below]))
    pairs = ", ".join(f"{r:g}: {a:.3f}/{b:.3f}" for r, a, b in zip(rhos[below], prop[below], dig[below]))
    record(acceptance_report, 11, ok,
           f"trade-off at {snr:g} dB over {len(SEEDS)} seeds, proposal/digital below saturation "
           f"rho={saturation:g}: {pairs}")
