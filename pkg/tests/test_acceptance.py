"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line.

The learning and ablation criteria train real models on the shared phantom
benchmark (see ``benchmark.py``) and take several minutes in total.
"""

import statistics
import time
import warnings

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

import benchmark
from slimunet.annotations import expand_to_proposed, rasterize
from slimunet.cli import main
from slimunet.data import PhantomSpec, generate_phantoms, split_train_val
from slimunet.gradcheck import run_suite
from slimunet.losses import LossSpec, bce_loss, composite_loss, dice_loss, jaccard_loss
from slimunet.metrics import ConfusionCounts, metrics_from_counts
from slimunet.network import build_slim_unet, build_std_unet, count_params
from slimunet.training import TrainingConfig, fit, make_network, simulate_callbacks
from test_annotations import crossing_number_oracle, random_polygon


@pytest.fixture
def record(acceptance_log):
    def _record(number, ok, detail):
        acceptance_log.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok
    return _record


def test_criterion_01_parameter_counts(record):
    t0 = time.perf_counter()
    slim = count_params(build_slim_unet()).total_trainable
    std = count_params(build_std_unet()).total_trainable
    elapsed = time.perf_counter() - t0
    ok = slim == 4_705_377 and std == 8_635_809 and elapsed < 1
    assert record(1, ok, f"slim={slim:,} std={std:,} ({elapsed:.3f} s)")


def test_criterion_02_reduction_ratio(record):
    slim = count_params(build_slim_unet()).total_trainable
    std = count_params(build_std_unet()).total_trainable
    ratio = slim / std
    assert record(2, abs(ratio - 0.5448) <= 1e-4, f"slim/std = {ratio:.5f} (target 0.5448 +- 0.0001)")


def test_criterion_03_gradient_suite(record):
    t0 = time.perf_counter()
    results = run_suite(instances=100, seed=0, network_instances=10)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    ok = not failed and elapsed < 120 and all(r.instances >= 10 for r in results)
    assert record(3, ok, f"{len(results)} checks, max rel. err {worst:.2e}, "
                         f"failed {failed or 'none'}, {elapsed:.1f} s")


def test_criterion_04_loss_fixtures(record):
    y_t = np.array([1.0, 1.0, 0.0, 0.0])
    y_p = np.array([1.0, 0.0, 0.0, 0.0])
    bce = bce_loss([0.8, 0.2], [1, 0])
    dice = dice_loss(y_p, y_t, 1.0)
    jac = jaccard_loss(y_p, y_t, 1.0)
    djb, _ = composite_loss(LossSpec("L_DJB"), y_p, y_t)
    additivity = abs(djb - (dice + jac + bce_loss(y_p, y_t)))
    ok = (abs(bce - 0.223144) < 1e-6 and abs(dice - 0.25) < 1e-6
          and abs(jac - 0.333333) < 1e-6 and additivity <= 1e-12)
    assert record(4, ok, f"BCE {bce:.6f}, Dice {dice:.6f}, Jaccard {jac:.6f}, "
                         f"additivity err {additivity:.1e}")


def test_criterion_05_metric_fixtures(record):
    m = metrics_from_counts(ConfusionCounts(3, 1, 1, 11))
    exact = m == {"P": 75.0, "R": 75.0, "F1": 75.0, "DC": 75.0, "IoU": 60.0}
    gen = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        tp, fp, fn = (int(v) for v in gen.integers(0, 10_000, 3))
        if tp + fp + fn == 0:
            continue
        r = metrics_from_counts(ConfusionCounts(tp, fp, fn, 0))
        iou = r["IoU"] / 100
        worst = max(worst, abs(r["DC"] / 100 - 2 * iou / (1 + iou)))
    assert record(5, exact and worst <= 1e-12,
                  f"fixture {m}, DC/IoU identity max err {worst:.1e}")


def test_criterion_06_callback_traces(record):
    plateau = [d.events for d in simulate_callbacks([1.0] + [0.9] * 6)]
    constant = simulate_callbacks([1.0] * 11)
    ok = (plateau == [["checkpoint_saved"]] * 2 + [[]] * 4 + [["lr_reduced"]]
          and simulate_callbacks([1.0] + [0.9] * 6)[-1].lr == pytest.approx(1e-4)
          and len(constant) == 11 and constant[-1].stop
          and "early_stopped" in constant[-1].events
          and not any(d.stop for d in constant[:-1]))
    assert record(6, ok, f"plateau lr reduced at epoch {len(plateau)}, "
                         f"early stop at epoch {len(constant)}")


def test_criterion_07_epoch_time_ordering(record):
    # fast variant: 40 phantoms at 64x64, base 16, single BLAS thread
    samples, _ = generate_phantoms(PhantomSpec(count=40, image_size=64, subjects=10, seed=7))
    train, val = split_train_val(samples, seed=0)
    medians = {}
    with threadpool_limits(limits=1):
        for model in ("slim", "std"):
            cfg = TrainingConfig(model=model, base_filters=16, input_size=64, max_epochs=5,
                                 hflip=False, early_stop_patience=100, seed=0)
            result = fit(make_network(cfg), train, val, cfg)
            medians[model] = statistics.median(result.epoch_times)
    ratio = medians["slim"] / medians["std"]
    assert record(7, ratio <= 0.80, f"median epoch slim {medians['slim']:.2f} s, "
                                    f"std {medians['std']:.2f} s, ratio {ratio:.3f} (<= 0.80)")


@pytest.mark.slow
def test_criterion_08_learning_capability(record):
    t0 = time.perf_counter()
    run = benchmark.run("djb", 0)
    elapsed = time.perf_counter() - t0
    train_dc, held_dc = run["train"]["DC"], run["held_out"]["DC"]
    ok = train_dc >= 95 and held_dc >= 85 and run["epochs"] <= 50
    assert record(8, ok, f"training DC {train_dc:.2f} (>= 95), held-out DC {held_dc:.2f} (>= 85), "
                         f"{run['epochs']} epochs, {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_09_loss_ablation(record):
    iou = {
        loss: statistics.mean(benchmark.run(loss, seed)["held_out"]["IoU"] for seed in benchmark.REPEATS)
        for loss in ("djb", "d", "dj")
    }
    ok = iou["djb"] >= iou["d"] - 0.5 and iou["djb"] >= iou["dj"] - 0.5
    assert record(9, ok, f"mean held-out IoU: L_DJB {iou['djb']:.2f}, L_D {iou['d']:.2f}, "
                         f"L_DJ {iou['dj']:.2f} (L_DJB must be within 0.5 of both)")


@pytest.mark.slow
def test_criterion_10_annotation_ablation(record):
    proposed = statistics.mean(benchmark.run("djb", s)["boundary_recall"] for s in benchmark.REPEATS)
    tight = statistics.mean(benchmark.run("djb", s, 0)["boundary_recall"] for s in benchmark.REPEATS)

    gen = np.random.default_rng(10)
    oracle_ok = True
    for _ in range(200):
        size = (int(gen.integers(5, 24)), int(gen.integers(5, 24)))
        poly = random_polygon(gen, size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = rasterize(poly, size)
        oracle_ok &= bool(np.array_equal(got, crossing_number_oracle(poly, size)))
    contained = all(
        np.all(expand_to_proposed(s.tight_mask, m) >= s.tight_mask)
        for s in benchmark.phantoms()[0] for m in (1, 2, 3)
    )
    ok = proposed >= tight - 1.0 and oracle_ok and contained
    assert record(10, ok, f"boundary recall proposed {proposed:.2f} vs tight {tight:.2f}; "
                          f"rasterizer oracle {'ok' if oracle_ok else 'MISMATCH'}, "
                          f"containment {'ok' if contained else 'VIOLATED'}")


def test_criterion_11_determinism(record, tmp_path):
    data = tmp_path / "data"
    assert main(["phantoms", "--count", "8", "--subjects", "4", "--size", "32", "--out", str(data)]) == 0
    histories = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", str(data), "--out", str(out), "--size", "32", "--base-filters", "8",
                     "--epochs", "3", "--seed", "11", "--verify"]) == 0
        histories.append((out / "history.csv").read_bytes())
    same = histories[0] == histories[1]
    assert record(11, same, f"history files {'byte-identical' if same else 'DIFFER'} "
                            f"({len(histories[0])} bytes)")
