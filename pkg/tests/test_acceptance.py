"""Acceptance gate. Each test records one PASS/FAIL line and asserts honestly."""

import math
import time

import numpy as np
import pytest
from scipy import stats

from sketchcpd import experiments as ex
from sketchcpd import theory
from sketchcpd.detector import (
    FixedSketchDetector,
    MissingDataDetector,
    glr_direct_max,
    glr_timevarying_pinv,
)
from sketchcpd.montecarlo import SimPlan, simulate_arl
from sketchcpd.numerics import RngStream
from sketchcpd.projections import (
    expander_projection,
    gaussian_projection,
    identity_projection,
    sigma_max,
)

M_GRID = (100, 70, 50, 30, 10)


def _check_close(got, want, tol):
    return all(abs(g - w) <= tol for g, w in zip(got, want))


def _fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def test_01_threshold_reproduction(acceptance):
    t0 = time.perf_counter()
    got = [theory.calibrate_b(M, 200, 5000) for M in M_GRID]
    elapsed = time.perf_counter() - t0
    want = [84.65, 64.85, 51.04, 36.36, 19.59]
    ok = _check_close(got, want, 0.05) and elapsed < 5
    acceptance("1 thresholds", ok, f"b={_fmt(got)} in {elapsed:.2f}s")
    assert ok


def test_02_timevarying_thresholds(acceptance):
    t0 = time.perf_counter()
    got = [theory.calibrate_b_timevarying(100, M, 200, 5000) for M in M_GRID]
    elapsed = time.perf_counter() - t0
    want = [84.65, 83.72, 82.84, 81.46, 78.32]
    ok = _check_close(got, want, 0.05) and elapsed < 5
    acceptance("2 time-varying thresholds", ok, f"b={_fmt(got)} in {elapsed:.2f}s")
    assert ok


@pytest.mark.slow
def test_03_simulated_arl(acceptance):
    plan = SimPlan(kind="fixed", projection="gaussian", N=100, M=50, window=200, threshold=51.04,
                   replicates=2000, root_seed=0, target_arl=5000)
    t0 = time.perf_counter()
    res = simulate_arl(plan)
    elapsed = time.perf_counter() - t0
    z = (res.mean - 5000) / res.stderr
    ok = abs(z) <= 3 and elapsed <= 600
    acceptance("3 simulated ARL", ok,
               f"ARL={res.mean:.1f} se={res.stderr:.1f} z={z:+.2f} capped={res.capped_count} in {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_04_edd_reproduction(acceptance):
    t0 = time.perf_counter()
    report = ex.run_table1(scale="desk", seed=0)
    elapsed = time.perf_counter() - t0
    simu = report.column("edd_simu")
    se = report.column("edd_stderr")
    theo = report.column("edd_theo")
    simu_want = [4.3, 5.1, 5.9, 7.6, 17.4]
    theo_want = [3.4, 4.0, 4.8, 7.7, 19.8]
    simu_ok = [abs(s - w) <= 3 * e for s, w, e in zip(simu, simu_want, se)]
    theo_ok = [abs(t - w) <= 0.5 for t, w in zip(theo, theo_want)]
    acceptance("4a simulated EDD", all(simu_ok) and elapsed <= 600,
               f"edd={_fmt(simu)} se={_fmt(se)} per-M={simu_ok} in {elapsed:.0f}s")
    acceptance("4b theoretical EDD", all(theo_ok), f"edd={_fmt(theo)} per-M={theo_ok}")
    assert all(simu_ok) and all(theo_ok)


def test_05_gamma_law(acceptance):
    t0 = time.perf_counter()
    details, ok = [], True
    for M, N in ((10, 40), (50, 100)):
        g = ex.gamma_samples(M, N, 2000, seed=0)
        p = stats.kstest(g, stats.beta(M / 2, (N - M) / 2).cdf).pvalue
        good = p > 0.01 and abs(g.mean() - M / N) <= 0.01
        ok &= good
        details.append(f"({M},{N}) p={p:.3f} mean={g.mean():.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    acceptance("5 gamma law", ok, "; ".join(details) + f" in {elapsed:.1f}s")
    assert ok


def test_06_expander_bounds(acceptance):
    t0 = time.perf_counter()
    grid = [(10, 40, 2), (20, 100, 3), (50, 100, 5), (30, 90, 3), (25, 100, 4)]
    violations = 0
    worst_ratio = 0.0
    for gi, (M, N, d) in enumerate(grid):
        for rep in range(10):
            P = expander_projection(M, N, d, RngStream(1000 * gi + rep))
            A = P.entries
            gen = RngStream(1000 * gi + rep, 9).generator
            X = np.abs(gen.standard_normal((100, N))) * (gen.random((100, N)) < 0.5)
            X[0] = np.abs(gen.standard_normal(N))
            lhs = np.sum((X @ A.T) ** 2, axis=1)
            rhs = d * np.sum(X**2, axis=1)
            violations += int(np.sum(lhs < rhs * (1 - 1e-12)))
            bound = d * math.sqrt(N / M)
            for s in (np.linalg.norm(A, 2), sigma_max(A)):
                worst_ratio = max(worst_ratio, s / bound)
                violations += int(s > bound * (1 + 1e-12))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 60
    acceptance("6 expander bounds", ok,
               f"50 expanders, violations={violations}, max sigma/bound={worst_ratio:.6f} in {elapsed:.1f}s")
    assert ok


def test_07_statistic_equivalences(acceptance):
    t0 = time.perf_counter()
    gen = np.random.default_rng(7)
    err_direct = 0.0
    for case in range(100):
        M = int(gen.integers(1, 8))
        N = M + int(gen.integers(0, 6))
        w = int(gen.integers(1, 12))
        T = int(gen.integers(1, 25))
        A = gaussian_projection(M, N, RngStream(case))
        ys = gen.standard_normal((T, M)) + gen.normal(0, 2) * gen.standard_normal(M)
        det = FixedSketchDetector(A, w, np.inf)
        stat, _ = det.scan(ys)
        for t in range(1, T + 1):
            ref, _ = glr_direct_max(A, ys[:t], w)
            err_direct = max(err_direct, abs(stat[t - 1] - ref) / max(1.0, abs(ref)))

    err_pinv = 0.0
    for case in range(40):
        N = int(gen.integers(2, 51))
        w = int(gen.integers(1, 8))
        T = int(gen.integers(1, 12))
        det = MissingDataDetector(N, w, np.inf)
        hist = []
        for t in range(1, T + 1):
            idx = np.sort(gen.choice(N, size=int(gen.integers(0, N + 1)), replace=False))
            vals = gen.standard_normal(idx.size) + 0.7
            s, _ = det.step(idx, vals)
            S = np.eye(N)[idx]
            hist.append((S, vals))
            win = hist[-w:]
            ref = max(glr_timevarying_pinv([a for a, _ in win[j:]], [y for _, y in win[j:]])
                      for j in range(len(win)))
            err_pinv = max(err_pinv, abs(s - max(ref, 0.0)) / max(1.0, ref))

    err_full = 0.0
    for case in range(20):
        N = int(gen.integers(1, 20))
        w = int(gen.integers(1, 15))
        Y = gen.standard_normal((30, N)) + 0.5
        fixed, _ = FixedSketchDetector(identity_projection(N), w, np.inf).scan(Y)
        miss = MissingDataDetector(N, w, np.inf)
        full = np.array([miss.step(np.arange(N), y)[0] for y in Y])
        err_full = max(err_full, float(np.max(np.abs(full - fixed))))

    elapsed = time.perf_counter() - t0
    ok = err_direct <= 1e-8 and err_pinv <= 1e-8 and err_full <= 1e-12 and elapsed < 60
    acceptance("7 statistic equivalences", ok,
               f"whitened-vs-direct={err_direct:.1e} missing-vs-pinv={err_pinv:.1e} "
               f"full-mask-vs-identity={err_full:.1e} in {elapsed:.1f}s")
    assert ok


def test_08_threshold_linearity(acceptance):
    t0 = time.perf_counter()
    Ms = np.arange(5, 101, 5)
    bs = np.array([theory.calibrate_b(int(M), 200, 5000) for M in Ms])
    r2 = stats.linregress(Ms, bs).rvalue ** 2
    elapsed = time.perf_counter() - t0
    ok = r2 >= 0.995 and elapsed < 5
    acceptance("8 linearity", ok, f"R^2={r2:.5f} over M=5..100 in {elapsed:.2f}s")
    assert ok


@pytest.mark.slow
def test_09_baseline_ordering(acceptance):
    t0 = time.perf_counter()
    report = ex.run_baseline_comparison(scale="desk", seed=0)
    elapsed = time.perf_counter() - t0
    parts, ok = [], True
    for row in report.rows:
        matched = abs(row["arl_glr"] - row["arl_cusum"]) <= 0.05 * report.metadata["target_arl"]
        ordered = row["edd_glr"] <= row["edd_cusum"]
        ok &= matched and ordered
        parts.append(f"M={row['M']}: ARL {row['arl_glr']:.0f}/{row['arl_cusum']:.0f} "
                     f"EDD {row['edd_glr']:.1f}/{row['edd_cusum']:.1f}")
    ok &= elapsed <= 900
    acceptance("9 baseline ordering", ok, "; ".join(parts) + f" in {elapsed:.0f}s")
    assert ok


def test_10_determinism(acceptance):
    t0 = time.perf_counter()
    runs = {
        "table1": lambda th: ex.run_table1(seed=3, threads=th, replicates=80, M_grid=(50, 10)),
        "baseline": lambda th: ex.run_baseline_comparison(seed=3, threads=th, replicates=80, M_grid=(10,),
                                                          target_arl=300.0),
        "timevarying": lambda th: ex.run_timevarying_tables(seed=3, threads=th, replicates=40, M_grid=(50,)),
    }
    same = {name: f(1).to_csv() == f(4).to_csv() for name, f in runs.items()}
    elapsed = time.perf_counter() - t0
    ok = all(same.values())
    acceptance("10 determinism", ok, f"threads 1 vs 4 byte-identical: {same} in {elapsed:.0f}s")
    assert ok
