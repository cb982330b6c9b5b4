"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion is both visible and red.
"""

from dataclasses import replace
import json
import math
import os
import time

import numpy as np
import pytest

from micrometric import (
    DataRange,
    MetricConfig,
    WindowStats,
    calibrate,
    closed_form_alpha,
    estimate_offset,
    make_window,
    micro_ssim,
    mssim,
    scaled_ssim_objective,
    ssim_alpha_derivative,
)
from micrometric.calibration import collect_window_stats
from micrometric.cli import count_local_maxima, main
from micrometric.multiscale import MsSsimConfig, ms_ssim
from micrometric.saturation import COMPONENTS, pipeline_saturation
from micrometric.synthetic import SynthParams, generate_dataset, generate_uniform_noise

from oracles import derivative_terms, mssim_bruteforce, random_valid_stats, scaled_objective

# the "synthetic suite" shared by criteria 6 and 7
SUITE = SynthParams(height=256, width=256, n_blobs=20, gt_noise_sigma=2.0, seed=100)
SUITE_PAIRS = 8


@pytest.fixture(scope="module")
def suite():
    data = generate_dataset(SUITE, SUITE_PAIRS)
    gts = [d[0] for d in data]
    lows = [d[1] for d in data]
    return gts, lows, calibrate(gts, lows)


def _single(mx, my, vx, vy, vxy):
    return WindowStats(*(np.array([v]) for v in (mx, my, vx, vy, vxy)))


def test_criterion_1_closed_form_optimality(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    grid = np.geomspace(1e-3, 1e3, 100_000)
    log_step = math.log(grid[1] / grid[0])
    worst_steps = 0.0
    worst_s1 = 0.0
    for _ in range(1000):
        s = random_valid_stats(rng)
        alpha = closed_form_alpha(WindowStats(*(np.float64(v) for v in s)))
        best = grid[np.argmax(scaled_objective(*s, grid, 0.0, 0.0))]
        worst_steps = max(worst_steps, abs(math.log(alpha / best)) / log_step)
        d = ssim_alpha_derivative(_single(*s), alpha, 0.0, 0.0)
        scale = sum(abs(t) for t in derivative_terms(*s, alpha, 0.0, 0.0))
        worst_s1 = max(worst_s1, abs(d) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst_steps <= 1.0 and worst_s1 <= 1e-10 and elapsed < 10
    acceptance_line(1, ok, f"closed form within {worst_steps:.3f} grid steps of the grid argmax; "
                           f"max relative derivative {worst_s1:.2e} (<= 1e-10); {elapsed:.1f} s (< 10 s)")
    assert ok


def test_criterion_2_derivative_finite_differences(acceptance_line):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(1000):
        mx, my = rng.uniform(-2, 5, size=2)
        vx, vy = 10.0 ** rng.uniform(-6, 0, size=2)
        vxy = rng.uniform(-1, 1) * math.sqrt(vx * vy)
        alpha = 10.0 ** rng.uniform(-2, 2)
        c1, c2 = 10.0 ** rng.uniform(-8, -1, size=2)
        stats = _single(mx, my, vx, vy, vxy)
        h = 1e-6 * alpha
        fd = (scaled_ssim_objective(stats, alpha + h, c1, c2)
              - scaled_ssim_objective(stats, alpha - h, c1, c2)) / (2 * h)
        d = ssim_alpha_derivative(stats, alpha, c1, c2)
        worst = max(worst, abs(fd - d) / abs(d))
    ok = worst <= 1e-5
    acceptance_line(2, ok, f"max relative gap between central differences and the analytic "
                           f"derivative over 1000 samples: {worst:.2e} (<= 1e-5)")
    assert ok


def test_criterion_3_linear_transform_recovery(acceptance_line):
    t0 = time.perf_counter()
    p = SynthParams(height=512, width=512, scale=7.5, beta_gt=100.0, beta_pred=110.0,
                    poisson_gain=0.0, read_noise_sigma=0.0, seed=3)
    data = generate_dataset(p, 10)
    gts = [d[0] for d in data]
    lows = [d[1] for d in data]
    cal = calibrate(gts, lows)
    scores = [micro_ssim(g, l, cal).mssim for g, l in zip(gts, lows)]
    elapsed = time.perf_counter() - t0
    rel = abs(cal.alpha - 7.5) / 7.5
    ok = rel <= 0.01 and min(scores) >= 0.999 and elapsed < 30
    acceptance_line(3, ok, f"alpha={cal.alpha:.6f} (rel. error {rel:.1e} <= 1e-2); min MicroSSIM "
                           f"{min(scores):.6f} (>= 0.999); {elapsed:.1f} s at 512^2 (< 30 s)")
    assert ok


def test_criterion_4_alpha_uniqueness(acceptance_line):
    rng = np.random.default_rng(4)
    counts = []
    for k in range(30):
        p = SynthParams(height=128, width=128, n_blobs=int(rng.integers(5, 30)),
                        scale=float(rng.uniform(2, 10)), poisson_gain=float(rng.uniform(0.5, 3)),
                        read_noise_sigma=float(rng.uniform(0.5, 5)),
                        gt_noise_sigma=float(rng.uniform(0, 3)), seed=1000 + 10 * k)
        data = generate_dataset(p, 3)
        gts = [d[0] for d in data]
        lows = [d[1] for d in data]
        cal = calibrate(gts, lows)
        stats = collect_window_stats(gts, lows, cal.beta_gt, cal.beta_pred, cal.max_gt, cal.window())
        c1, c2, _ = cal.metric_config().constants(cal.data_range)
        grid = cal.alpha * np.geomspace(1e-2, 1e2, 2001)
        values = [scaled_ssim_objective(stats, a, c1, c2) for a in grid]
        counts.append(count_local_maxima(values))
    ok = all(c == 1 for c in counts)
    acceptance_line(4, ok, f"strict local maxima per dataset over [alpha/100, 100 alpha] "
                           f"(2001-point grid, 30 noisy datasets): {sorted(set(counts))}")
    assert ok


def test_criterion_5_offset_behavior(acceptance_line):
    p = SynthParams(height=192, width=192, gt_noise_sigma=2.0, quantize=True, seed=55)
    data = generate_dataset(p, 4)
    gts = [d[0] for d in data]
    lows = [d[1] for d in data]
    # one fixed c1 for every offset
    fixed = MetricConfig(data_range=DataRange.explicit(float(np.ptp(gts[0]))))
    lum, micro = [], []
    for d in (0.0, 1e2, 1e3, 1e4):
        g = [x + d for x in gts]
        l = [y + d for y in lows]
        lum.append(np.mean([mssim(a, b, fixed).component_means()["luminance"] for a, b in zip(g, l)]))
        cal = calibrate(g, l)
        micro.append(np.array([micro_ssim(a, b, cal).mssim for a, b in zip(g, l)]))
    increasing = all(b > a for a, b in zip(lum, lum[1:]))
    spread = max(float(np.max(np.abs(m - micro[0]))) for m in micro)
    ok = increasing and spread <= 1e-9
    acceptance_line(5, ok, f"vanilla mean luminance {['%.6f' % v for v in lum]} strictly increasing: "
                           f"{increasing}; max MicroSSIM change after recalibration {spread:.1e} (<= 1e-9)")
    assert ok


def test_criterion_6_saturation_ordering(acceptance_line, suite):
    gts, lows, cal = suite
    raw = MetricConfig(data_range=DataRange.dtype(16))
    unit = MetricConfig(data_range=DataRange.explicit(1.0))
    reps = pipeline_saturation(gts, lows, cal, raw_config=raw, calibrated_config=unit)
    ordered = {c: reps["raw"][c].mean >= reps["full"][c].mean for c in COMPONENTS}
    # the downscaling step alone, where the range policy switches from 16-bit to 1
    ratio = reps["background_removed"].structure.mean / reps["downscaled"].structure.mean
    expected = (65535.0 / cal.max_gt) ** 2
    rel = abs(ratio / expected - 1)
    ok = all(ordered.values()) and rel <= 0.01
    means = ", ".join(f"{c} {reps['raw'][c].mean:.3g} >= {reps['full'][c].mean:.3g}" for c in COMPONENTS)
    acceptance_line(6, ok, f"raw vs full mean delta: {means}; structure ratio {ratio:.6g} vs "
                           f"(65535/max_gt)^2 = {expected:.6g} (rel. {rel:.1e} <= 1e-2)")
    assert ok


def test_criterion_7_dataset_vs_instance_offsets(acceptance_line, suite):
    gts, _, cal = suite
    dataset, instance = [], []
    for i, g in enumerate(gts):
        noise = generate_uniform_noise(*g.shape, 0.0, 1.0, seed=500 + i)
        dataset.append(micro_ssim(g, noise, cal).mssim)
        own = replace(cal, beta_gt=estimate_offset([g]), beta_pred=estimate_offset([noise]))
        instance.append(micro_ssim(g, noise, own).mssim)
    d, inst = float(np.mean(dataset)), float(np.mean(instance))
    ok = inst - d >= 0.3 and d < 0.1
    acceptance_line(7, ok, f"MicroSSIM(GT, uniform noise): dataset-level offsets {d:.4f} (< 0.1), "
                           f"instance-level {inst:.4f}, gap {inst - d:.4f} (>= 0.3)")
    assert ok


def test_criterion_8_bruteforce_equivalence(acceptance_line):
    rng = np.random.default_rng(8)
    worst = 0.0
    for k in range(200):
        kind, side = ("gaussian", 11) if k % 2 == 0 else ("uniform", 7)
        w = make_window(kind, side)
        h, wd = rng.integers(side, 33, size=2)
        scale = 10.0 ** rng.uniform(-2, 4)
        x = rng.random((h, wd)) * scale
        y = x * rng.uniform(0.2, 2) + rng.standard_normal((h, wd)) * scale * rng.uniform(0, 0.5)
        gamma = float(np.ptp(x))
        cfg = MetricConfig(window=w)
        ref = mssim_bruteforce(x, y, w.weights, gamma)
        a = mssim(x, y, cfg).mssim
        b = ms_ssim(x, y, MsSsimConfig(base=cfg, levels=1))
        worst = max(worst, abs(a - ref), abs(b - ref))
    ok = worst <= 1e-10
    acceptance_line(8, ok, f"max |library - brute force| over 200 images (mssim and 1-level "
                           f"MS-SSIM): {worst:.1e} (<= 1e-10)")
    assert ok


@pytest.mark.slow
def test_criterion_9_performance(acceptance_line, tmp_path):
    d = tmp_path / "big"
    assert main(["synth", "--out", str(d), "--pairs", "25", "--height", "2048", "--width", "2048",
                 "--blobs", "400", "--gt-noise", "2", "--seed", "9"]) == 0
    manifest = str(d / "manifest.jsonl")
    cal = str(tmp_path / "cal.txt")
    t0 = time.perf_counter()
    assert main(["calibrate", "--manifest", manifest, "--out", cal]) == 0
    t_cal = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert main(["score", "--manifest", manifest, "--calibration", cal, "--metric", "microssim",
                 "--out", str(tmp_path / "r.json")]) == 0
    t_score = time.perf_counter() - t0
    cores = os.cpu_count()
    ok = t_cal < 60 and t_score < 60
    acceptance_line(9, ok, f"25 x 2048^2 pairs: calibrate {t_cal:.1f} s, score {t_score:.1f} s "
                           f"(each < 60 s) on {cores} core(s)")
    assert ok


def test_criterion_10_determinism(acceptance_line, tmp_path):
    d = tmp_path / "data"
    assert main(["synth", "--out", str(d), "--pairs", "4", "--height", "200", "--width", "200",
                 "--gt-noise", "2", "--seed", "10"]) == 0
    manifest = str(d / "manifest.jsonl")
    outputs = {}
    for threads in ("1", "8"):
        cal = tmp_path / f"cal{threads}.txt"
        rep = tmp_path / f"rep{threads}.json"
        assert main(["calibrate", "--manifest", manifest, "--out", str(cal), "--threads", threads]) == 0
        assert main(["score", "--manifest", manifest, "--calibration", str(cal), "--out", str(rep),
                     "--threads", threads, "--metric",
                     "microssim,microms3im,ssim,zscore-ssim,care-ssim,ms-ssim"]) == 0
        outputs[threads] = (cal.read_bytes(), rep.read_bytes())
    same_cal = outputs["1"][0] == outputs["8"][0]
    same_rep = outputs["1"][1] == outputs["8"][1]
    n = len(json.loads(outputs["1"][1])["records"])
    ok = same_cal and same_rep
    acceptance_line(10, ok, f"--threads 1 vs 8: calibration identical {same_cal}, report "
                            f"({n} records) identical {same_rep}")
    assert ok
