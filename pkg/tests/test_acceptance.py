"""Acceptance checks: one test per release criterion, each printing a
single PASS/FAIL line with its measured value.

Checks 5-7 evaluate the phantom benchmark (24 subjects, 5-fold CV, 7500
iterations per fold, 3 seeds). Those runs take many hours, so they are
produced ahead of time by ``scripts/acceptance_benchmark.py`` into
``results/acceptance/`` and the tests here read the per-run JSON artifacts.
If the artifact set is incomplete the affected tests fail with an explicit
"incomplete" diagnostic rather than being skipped.
"""

import itertools
import json
import time
from pathlib import Path

import conftest
import numpy as np
import pytest

from resrnn import autodiff as ad
from resrnn import layers, model as mdl, phantom, training
from resrnn.autodiff import Tape, Tensor
from resrnn.layers import CircleConfig, LSTMCellParams
from resrnn.model import ResRNNConfig, forward, init_params
from resrnn.phantom import (PhantomSpec, SpecRanges, generate_dataset,
                            generate_subject, measure_thickness_raycast,
                            write_dataset)
from resrnn.training import TrainConfig, learning_rate, model_gradcheck, toy_config

RESULTS_DIR = Path(__file__).resolve().parent.parent / "results" / "acceptance"
ORDERING_VARIANTS = ("resrnn_circle", "cnn", "rnn_circle", "rnn_plain")
SEEDS = (0, 1, 2)
N_FOLDS = 5
CPU_BUDGET_SECONDS = 4 * 2 * 3600  # two hours on four cores


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] check {num:02d}: {detail}"
    conftest.acceptance_verdicts.append(line)
    print(line)
    assert ok, f"check {num:02d} failed: {detail}"


def _zero_lstm(hidden: int, input_dim: int) -> LSTMCellParams:
    rng = np.random.default_rng(0)
    p = layers.init_lstm(rng, hidden, input_dim)
    for t in p.tensors():
        t.data = np.zeros_like(t.data)
    return p


def test_01_full_model_gradient_check():
    start = time.time()
    errors = model_gradcheck(toy_config(), seed=0)
    elapsed = time.time() - start
    worst = max(errors.values())
    _verdict(1, worst < 1e-4 and elapsed < 60.0,
             f"max relative gradient error {worst:.2e} (< 1e-4) in {elapsed:.1f}s (< 60s)")


def test_02_circular_equals_tiled_plain_recurrence():
    rng = np.random.default_rng(42)
    worst = 0.0
    draws = 0
    for seq_len, depth in itertools.product((1, 2, 3, 6, 20), (1, 2, 3)):
        for _ in range(2):
            hidden, input_dim = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            p = layers.init_lstm(rng, hidden, input_dim)
            xs = [Tensor(rng.normal(size=input_dim)) for _ in range(seq_len)]
            circ = layers.rnn_run_circle(p, xs, CircleConfig(depth))
            plain = layers.rnn_run_plain(p, xs * depth)[-seq_len:]
            worst = max(worst, max(np.max(np.abs(c.data - q.data))
                                   for c, q in zip(circ, plain)))
            draws += 1
    _verdict(2, worst < 1e-12 and draws >= 20,
             f"circle vs tiled-plain max deviation {worst:.2e} (< 1e-12) over {draws} draws")


def test_03_all_zero_cell_emits_exact_zeros():
    rng = np.random.default_rng(3)
    p = _zero_lstm(4, 5)
    xs = [Tensor(rng.normal(size=5)) for _ in range(6)]
    outs = (layers.rnn_run_plain(p, xs)
            + layers.rnn_run_circle(p, xs, CircleConfig(3)))
    exact = all(np.array_equal(h.data, np.zeros(4)) for h in outs)
    _verdict(3, exact, "zero-parameter recurrence emits exactly zero hidden states")


def test_04_residual_decomposition():
    worst = 0.0
    for variant in ("resrnn_plain", "resrnn_circle"):
        cfg = toy_config(variant=variant)
        params = init_params(cfg, seed=11)
        rng = np.random.default_rng(8)
        seq = rng.random((cfg.frames, cfg.input_size, cfg.input_size))
        full = forward(params, cfg, seq).data
        cnn_only = forward(params, toy_config(variant="cnn"), seq).data
        emb = mdl.cnn_embed(params, cfg, Tensor(seq[:, None])).data
        residual = mdl.rnn_residual(params, cfg, emb).data
        worst = max(worst, float(np.max(np.abs(full - (cnn_only + residual)))))
    _verdict(4, worst < 1e-12,
             f"output = direct estimate + recurrent residual, max deviation {worst:.2e} (< 1e-12)")


def _load_ordering_runs():
    runs = {}
    for variant in ORDERING_VARIANTS:
        for seed in SEEDS:
            for fold in range(N_FOLDS):
                path = RESULTS_DIR / f"ordering_{variant}_s{seed}_f{fold}.json"
                if path.exists():
                    runs[(variant, seed, fold)] = json.loads(path.read_text())
    return runs


def _variant_mae(runs, variant):
    """Per-seed CV MAE pooled over folds by test-set size, averaged over seeds."""
    per_seed = []
    for seed in SEEDS:
        folds = [runs[(variant, seed, f)] for f in range(N_FOLDS)]
        weights = np.array([len(r["test_subjects"]) for r in folds], dtype=float)
        maes = np.array([r["overall_mae"] for r in folds])
        per_seed.append(float((weights * maes).sum() / weights.sum()))
    return float(np.mean(per_seed)), per_seed


def test_05_benchmark_ordering_and_budget():
    runs = _load_ordering_runs()
    expected = len(ORDERING_VARIANTS) * len(SEEDS) * N_FOLDS
    if len(runs) < expected:
        _verdict(5, False,
                 f"incomplete: {len(runs)} of {expected} cross-validation runs finished; "
                 "run scripts/acceptance_benchmark.py to completion")
    resrnn, _ = _variant_mae(runs, "resrnn_circle")
    cnn, _ = _variant_mae(runs, "cnn")
    circle, _ = _variant_mae(runs, "rnn_circle")
    plain, _ = _variant_mae(runs, "rnn_plain")
    cpu = sum(r["cpu_seconds"] for r in runs.values())
    ok = resrnn <= cnn and circle <= plain and cpu < CPU_BUDGET_SECONDS
    _verdict(5, ok,
             f"3-seed CV MAE: resrnn_circle {resrnn:.5f} <= cnn {cnn:.5f}; "
             f"rnn_circle {circle:.5f} <= rnn_plain {plain:.5f}; "
             f"compute {cpu:.0f}s < {CPU_BUDGET_SECONDS}s")


def test_06_first_frame_benefit_of_circular_recurrence():
    values = {}
    missing = []
    for variant in ("rnn_circle", "rnn_plain"):
        maes = []
        for seed in SEEDS:
            path = RESULTS_DIR / f"firstframe_{variant}_s{seed}_f0.json"
            if path.exists():
                maes.append(json.loads(path.read_text())["frame1_mae"])
            else:
                missing.append(path.name)
        values[variant] = maes
    if missing:
        _verdict(6, False,
                 f"incomplete: missing {len(missing)} of 6 first-frame runs "
                 f"({', '.join(missing)}); run scripts/acceptance_benchmark.py")
    circle = float(np.mean(values["rnn_circle"]))
    plain = float(np.mean(values["rnn_plain"]))
    _verdict(6, circle < plain,
             f"temporal-only frame-1 MAE: circle {circle:.5f} < plain {plain:.5f} (3-seed mean)")


def test_07_held_out_accuracy_threshold():
    runs = _load_ordering_runs()
    have = [k for k in runs if k[0] == "resrnn_circle"]
    expected = len(SEEDS) * N_FOLDS
    if len(have) < expected:
        _verdict(7, False,
                 f"incomplete: {len(have)} of {expected} resrnn_circle runs finished; "
                 "run scripts/acceptance_benchmark.py to completion")
    mae, per_seed = _variant_mae(runs, "resrnn_circle")
    _verdict(7, mae <= 0.0125,
             f"resrnn_circle held-out MAE {mae:.5f} <= 0.0125 normalized "
             f"(per seed: {', '.join(f'{v:.5f}' for v in per_seed)})")


def test_08_learning_rate_schedule():
    cfg = TrainConfig()
    values = [learning_rate(cfg, it) for it in (0, 2500, 5000)]
    ok = values == [0.05, 0.025, 0.0125]
    _verdict(8, ok, f"learning rate at iterations 0/2500/5000 = {values} "
                    "(expected [0.05, 0.025, 0.0125])")


def test_09_raycast_matches_analytic_thickness():
    ranges = SpecRanges(noise_sigma=(0.0, 0.0))
    subjects = generate_dataset(10, seed=123, ranges=ranges)
    worst = 0.0
    for seq in subjects:
        for f in (0, seq.spec.frames // 2):
            measured = measure_thickness_raycast(seq.frames[f], seq.spec)
            worst = max(worst, float(np.max(np.abs(
                measured - seq.labels[f] * seq.spec.image_size))))
    _verdict(9, worst < 0.75,
             f"raycast vs analytic thickness, worst case {worst:.3f}px (< 0.75px) "
             "over 10 random phantoms")


def test_10_bit_identical_reproducibility(tmp_path):
    subjects = generate_dataset(3, seed=99, frames=4)
    a, b = tmp_path / "a.rwtd", tmp_path / "b.rwtd"
    write_dataset(a, subjects)
    write_dataset(b, generate_dataset(3, seed=99, frames=4))
    data_ok = a.read_bytes() == b.read_bytes()

    cfg = ResRNNConfig(variant="resrnn_circle", frames=4)
    tcfg = TrainConfig(max_iters=3, seed=5, log_every=1)
    ca, cb = tmp_path / "a.rwtc", tmp_path / "b.rwtc"
    for path in (ca, cb):
        params, _ = training.train(subjects, cfg, tcfg)
        mdl.save_checkpoint(path, cfg, params)
    model_ok = ca.read_bytes() == cb.read_bytes()
    _verdict(10, data_ok and model_ok,
             f"dataset bytes identical: {data_ok}; checkpoint bytes identical: {model_ok}")
