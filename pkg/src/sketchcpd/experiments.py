"""Scripted experiments: threshold/EDD tables, EDD curves, baseline and power-grid studies.

Each ``run_*`` returns an :class:`ExperimentReport` whose CSV form depends only
on the arguments (name, seed, scale, overrides), never on the thread count or
on timing. Theory columns are computed without the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import theory
from .montecarlo import SimPlan, build_projection, build_topology, calibrate_b_mc, simulate, simulate_edd
from .numerics import RngStream
from .projections import gamma_coefficient, gaussian_projection

SCALES = ("desk", "paper")
TARGET_ARL = 5000.0
WINDOW = 200


@dataclass
class ExperimentReport:
    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown report columns: {sorted(unknown)}")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def to_csv(self) -> str:
        lines = [f"# experiment = {self.name}"]
        lines += [f"# {k} = {_cell(v)}" for k, v in self.metadata.items()]
        lines.append(",".join(self.columns))
        for r in self.rows:
            lines.append(",".join(_cell(r.get(c)) for c in self.columns))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.6g}"
    return str(v)


def _check_scale(scale: str) -> None:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")


def _replicates(scale: str, replicates: int | None) -> int:
    if replicates is not None:
        return replicates
    return 10_000 if scale == "paper" else 2000


# ---------------------------------------------------------------------------
# fixed Gaussian projection: thresholds and EDDs


def run_table1(
    scale: str = "desk",
    seed: int = 0,
    threads: int = 1,
    replicates: int | None = None,
    M_grid=(100, 70, 50, 30, 10),
    N: int = 100,
    mu_value: float = 0.5,
) -> ExperimentReport:
    """Thresholds and EDDs for a fixed seeded Gaussian ``A`` (N=100, w=200, ARL 5000).

    ``edd_theo`` uses ``delta^2 = (M/N) ||mu||^2`` (the mean of the signal-power
    ratio); ``edd_theo_realized`` uses the realized ratio of the simulated
    ``A`` and the simulated threshold.
    """
    _check_scale(scale)
    reps = _replicates(scale, replicates)
    energy = N * mu_value**2
    report = ExperimentReport(
        "table1",
        ["M", "b_theo", "b_simu", "arl_simu", "arl_stderr", "edd_theo", "edd_simu", "edd_std", "edd_stderr",
         "gamma_realized", "edd_theo_realized"],
        metadata={
            "seed": seed, "scale": scale, "replicates": reps, "N": N, "w": WINDOW, "target_arl": TARGET_ARL,
            "mu_value": mu_value,
            "b_theo": "theory.calibrate_b", "edd_theo": "theory.edd_fixed with delta^2 = (M/N)*sum(mu^2)",
            "b_simu": "montecarlo.calibrate_b_mc (common random numbers)", "edd_simu": "montecarlo.simulate_edd at b_simu",
        },
    )
    for M in M_grid:
        plan = SimPlan(kind="fixed", projection="gaussian", N=N, M=M, window=WINDOW, replicates=reps,
                       root_seed=seed, threads=threads, target_arl=TARGET_ARL)
        b_theo = theory.calibrate_b(M, WINDOW, TARGET_ARL)
        edd_theo = theory.edd_fixed(b_theo, M, math.sqrt(M / N * energy))
        cal = calibrate_b_mc(plan, TARGET_ARL)
        edd = simulate_edd(plan.with_(threshold=cal.b, mu_value=mu_value))
        A = build_projection(plan, RngStream(seed, 0))
        gamma = gamma_coefficient(A, np.full(N, mu_value))
        report.add(
            M=M, b_theo=b_theo, b_simu=cal.b, arl_simu=cal.estimate.mean, arl_stderr=cal.estimate.stderr,
            edd_theo=edd_theo, edd_simu=edd.mean, edd_std=edd.std, edd_stderr=edd.stderr,
            gamma_realized=gamma, edd_theo_realized=theory.edd_fixed(cal.b, M, math.sqrt(gamma * energy)),
        )
    return report


# ---------------------------------------------------------------------------
# time-varying 0-1 projections


def run_timevarying_tables(
    scale: str = "desk",
    seed: int = 0,
    threads: int = 1,
    replicates: int | None = None,
    M_grid=(100, 70, 50, 30, 10),
    N: int = 100,
) -> ExperimentReport:
    """Thresholds and EDDs when ``M`` random coordinates are observed each step.

    Two signals with equal energy 25: every entry 0.5 (``edd_simu``) and a
    random quarter of the entries equal to 1 (``edd_simu_sparse``). Both share
    the threshold and the theoretical EDD.
    """
    _check_scale(scale)
    reps = _replicates(scale, replicates)
    energy = 25.0
    report = ExperimentReport(
        "timevarying",
        ["M", "b_theo", "b_simu", "arl_simu", "arl_stderr", "edd_theo", "edd_theo_printed", "edd_theo_bsimu",
         "edd_simu", "edd_std", "edd_stderr", "edd_simu_sparse", "edd_std_sparse", "edd_stderr_sparse"],
        metadata={
            "seed": seed, "scale": scale, "replicates": reps, "N": N, "w": WINDOW, "target_arl": TARGET_ARL,
            "signal_energy": energy,
            "b_theo": "theory.calibrate_b_timevarying",
            "edd_theo": "theory.edd_timevarying(printed=False) at b_theo",
            "edd_theo_printed": "theory.edd_timevarying(printed=True) at b_theo",
            "edd_theo_bsimu": "theory.edd_timevarying(printed=False) at b_simu",
            "edd_simu": "all entries 0.5", "edd_simu_sparse": "25% of entries 1",
        },
    )
    for M in M_grid:
        plan = SimPlan(kind="timevarying", N=N, M=M, window=WINDOW, replicates=reps, root_seed=seed,
                       threads=threads, target_arl=TARGET_ARL)
        b_theo = theory.calibrate_b_timevarying(N, M, WINDOW, TARGET_ARL)
        cal = calibrate_b_mc(plan, TARGET_ARL)
        dense = simulate_edd(plan.with_(threshold=cal.b, mu_value=0.5))
        sparse = simulate_edd(plan.with_(threshold=cal.b, mu_value=1.0, mu_fraction=0.25))
        report.add(
            M=M, b_theo=b_theo, b_simu=cal.b, arl_simu=cal.estimate.mean, arl_stderr=cal.estimate.stderr,
            edd_theo=theory.edd_timevarying(b_theo, N, M, energy, printed=False),
            edd_theo_printed=theory.edd_timevarying(b_theo, N, M, energy, printed=True),
            edd_theo_bsimu=theory.edd_timevarying(cal.b, N, M, energy, printed=False),
            edd_simu=dense.mean, edd_std=dense.std, edd_stderr=dense.stderr,
            edd_simu_sparse=sparse.mean, edd_std_sparse=sparse.std, edd_stderr_sparse=sparse.stderr,
        )
    return report


# ---------------------------------------------------------------------------
# EDD curves and minimum-M extraction


CURVE_KINDS = ("gaussian", "expander", "timevarying")
SWEEPS = ("mu0", "p")
EXPANDER_DEGREE = 3


def _curve_threshold(kind: str, N: int, M: int) -> float:
    if kind == "timevarying":
        return theory.calibrate_b_timevarying(N, M, WINDOW, TARGET_ARL)
    return theory.calibrate_b(M, WINDOW, TARGET_ARL)


def _curve_plan(kind: str, N: int, M: int, reps: int, seed: int, threads: int) -> SimPlan:
    common = dict(N=N, M=M, window=WINDOW, replicates=reps, root_seed=seed, threads=threads,
                  target_arl=TARGET_ARL, threshold=_curve_threshold(kind, N, M))
    if kind == "timevarying":
        return SimPlan(kind="timevarying", **common)
    if kind == "expander":
        return SimPlan(kind="fixed", projection="expander", degree=EXPANDER_DEGREE, **common)
    return SimPlan(kind="fixed", projection="gaussian", **common)


def minimum_M(M_grid, edd: dict, edd_full: float, slack: float = 1.0):
    """Smallest ``M`` whose EDD is within ``slack`` of the full-data EDD, or None."""
    ok = [M for M in sorted(M_grid) if edd[M] <= edd_full + slack]
    return ok[0] if ok else None


def run_edd_curves(
    kind: str = "gaussian",
    sweep: str = "mu0",
    scale: str = "desk",
    seed: int = 0,
    threads: int = 1,
    replicates: int | None = None,
    N: int = 500,
    M_grid=None,
    values=None,
) -> ExperimentReport:
    """EDD versus signal strength (``mu0``: every entry equal) or sparsity (``p``: a
    random fraction of entries equal to 1), for several ``M`` plus full data.

    Thresholds come from the ARL approximation at 5000. Each row also holds
    the minimum ``M`` with ``EDD <= EDD_o + 1``.
    """
    if kind not in CURVE_KINDS:
        raise ValueError(f"kind must be one of {CURVE_KINDS}, got {kind!r}")
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {SWEEPS}, got {sweep!r}")
    _check_scale(scale)
    reps = _replicates(scale, replicates)
    if M_grid is None:
        M_grid = (30, 50, 100, 150, 300) if scale == "paper" else (50, 100, 300)
    if values is None:
        values = (0.3, 0.5, 0.7, 1.0, 1.2) if sweep == "mu0" else (0.05, 0.1, 0.3, 0.5, 0.7, 1.0)
    M_grid = tuple(M_grid)
    cols = ["value", "edd_full", "edd_full_std"]
    for M in M_grid:
        cols += [f"edd_M{M}", f"edd_std_M{M}"]
    cols.append("M_star")
    report = ExperimentReport(
        f"curves_{kind}_{sweep}", cols,
        metadata={"seed": seed, "scale": scale, "replicates": reps, "N": N, "w": WINDOW, "target_arl": TARGET_ARL,
                  "kind": kind, "sweep": sweep, "thresholds": "theory ARL approximation at target_arl",
                  "expander_degree": EXPANDER_DEGREE if kind == "expander" else ""},
    )
    full_plan = SimPlan(kind="fixed", projection="identity", N=N, M=N, window=WINDOW, replicates=reps,
                        root_seed=seed, threads=threads, target_arl=TARGET_ARL,
                        threshold=theory.calibrate_b(N, WINDOW, TARGET_ARL))
    plans = {M: _curve_plan(kind, N, M, reps, seed, threads) for M in M_grid}
    for v in values:
        signal = dict(mu_value=v, mu_fraction=1.0) if sweep == "mu0" else dict(mu_value=1.0, mu_fraction=v)
        full = simulate_edd(full_plan.with_(**signal))
        row = {"value": v, "edd_full": full.mean, "edd_full_std": full.std}
        edd = {}
        for M, plan in plans.items():
            res = simulate_edd(plan.with_(**signal))
            edd[M] = res.mean
            row[f"edd_M{M}"] = res.mean
            row[f"edd_std_M{M}"] = res.std
        row["M_star"] = minimum_M(M_grid, edd, full.mean)
        report.add(**row)
    return report


# ---------------------------------------------------------------------------
# baseline comparison


def run_baseline_comparison(
    scale: str = "desk",
    seed: int = 0,
    threads: int = 1,
    replicates: int | None = None,
    N: int = 100,
    M_grid=(10, 30, 50),
    mu_value: float = 0.2,
    mu_fraction: float = 1.0,
    target_arl: float = TARGET_ARL,
) -> ExperimentReport:
    """Sketch GLR versus the summed per-coordinate CUSUM on the same sketches.

    Both thresholds are calibrated by simulation to the same ARL target on
    shared noise paths; EDDs are then simulated at those thresholds.
    """
    _check_scale(scale)
    reps = _replicates(scale, replicates)
    report = ExperimentReport(
        "baseline",
        ["M", "b_glr", "arl_glr", "b_cusum", "arl_cusum", "edd_glr", "edd_glr_stderr", "edd_cusum",
         "edd_cusum_stderr"],
        metadata={"seed": seed, "scale": scale, "replicates": reps, "N": N, "w": WINDOW, "target_arl": target_arl,
                  "mu_value": mu_value, "mu_fraction": mu_fraction, "cusum_reference": "all ones",
                  "matching": "both thresholds from montecarlo.calibrate_b_mc, rel_tol 0.01"},
    )
    for M in M_grid:
        base = SimPlan(kind="fixed", projection="gaussian", N=N, M=M, window=WINDOW, replicates=reps,
                       root_seed=seed, threads=threads, target_arl=target_arl)
        out = {"M": M}
        for name, plan in (("glr", base), ("cusum", base.with_(kind="cusum"))):
            cal = calibrate_b_mc(plan, target_arl)
            edd = simulate_edd(plan.with_(threshold=cal.b, mu_value=mu_value, mu_fraction=mu_fraction))
            out.update({f"b_{name}": cal.b, f"arl_{name}": cal.estimate.mean, f"edd_{name}": edd.mean,
                        f"edd_{name}_stderr": edd.stderr})
        report.add(**out)
    return report


# ---------------------------------------------------------------------------
# power network


@dataclass(frozen=True)
class FailureScenario:
    """Mean shift ``mu0`` on a random fraction ``p`` of the edges, ``M`` nodes sensed per step."""

    topology: str = ""  # edge-list path; empty selects a synthetic grid
    p: float = 0.05
    mu0: float = 1.0
    M: int = 20
    seed: int = 0
    grid_nodes: int = 200
    grid_edges: int = 300

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"affected fraction must lie in (0, 1], got {self.p}")
        if not math.isfinite(self.mu0):
            raise ValueError("mu0 must be finite")


def run_power_grid(
    scenario: FailureScenario = FailureScenario(),
    sweep: str = "mu0",
    scale: str = "desk",
    threads: int = 1,
    replicates: int | None = None,
    M_grid=None,
    values=None,
    calibration_replicates: int | None = None,
) -> ExperimentReport:
    """EDD versus ``mu0`` (fraction fixed) or versus ``p`` (shift 1) on a network.

    Each step observes ``M`` random nodes, each reporting the sum over its
    incident edges. The detector treats the node readings, scaled by
    ``1/sqrt(degree)``, as independent unit-variance coordinates (node-diagonal
    approximation of the sketch covariance). This is exact when the observed
    nodes in a window are pairwise non-adjacent; otherwise it is an
    approximation, which is why the threshold is calibrated by simulation of the
    true, correlated readings.
    """
    if sweep not in SWEEPS:
        raise ValueError(f"sweep must be one of {SWEEPS}, got {sweep!r}")
    _check_scale(scale)
    reps = _replicates(scale, replicates)
    cal_reps = calibration_replicates or (reps if scale == "paper" else min(reps, 500))
    if M_grid is None:
        M_grid = (scenario.M,)
    if values is None:
        values = (0.0, 1.0, 2.0, 4.0) if sweep == "mu0" else (0.05, 0.2, 0.4)
    base = SimPlan(kind="grid", M=M_grid[0], N=1, window=WINDOW, replicates=reps, root_seed=scenario.seed,
                   threads=threads, target_arl=TARGET_ARL, topology=scenario.topology,
                   grid_nodes=scenario.grid_nodes, grid_edges=scenario.grid_edges)
    topo = build_topology(base)
    cols = ["value"]
    for M in M_grid:
        cols += [f"b_M{M}", f"edd_M{M}", f"edd_stderr_M{M}", f"capped_M{M}"]
    report = ExperimentReport(
        f"grid_{sweep}", cols,
        metadata={"seed": scenario.seed, "scale": scale, "replicates": reps, "calibration_replicates": cal_reps,
                  "topology": scenario.topology or f"synthetic({scenario.grid_nodes} nodes, {scenario.grid_edges} edges)",
                  "nodes": topo.node_count, "edges": topo.edge_count, "w": WINDOW, "target_arl": TARGET_ARL,
                  "affected_fraction": scenario.p if sweep == "mu0" else "", "shift": scenario.mu0 if sweep == "p" else "",
                  "detector": "node-diagonal approximation of the per-step sketch covariance"},
    )
    thresholds = {}
    for M in M_grid:
        thresholds[M] = calibrate_b_mc(base.with_(M=M, replicates=cal_reps), TARGET_ARL).b
    for v in values:
        signal = dict(mu_value=v, mu_fraction=scenario.p) if sweep == "mu0" else dict(mu_value=scenario.mu0, mu_fraction=v)
        row = {"value": v}
        for M in M_grid:
            res = simulate(base.with_(M=M, threshold=thresholds[M], change="start", **signal))
            row.update({f"b_M{M}": thresholds[M], f"edd_M{M}": res.mean, f"edd_stderr_M{M}": res.stderr,
                        f"capped_M{M}": res.capped_count})
        report.add(**row)
    return report


# ---------------------------------------------------------------------------
# normality check for user residuals


@dataclass(frozen=True)
class NormalityResult:
    statistic: float
    pvalue: float
    n: int


def ks_normality(values, standardize: bool = False) -> NormalityResult:
    """One-sample Kolmogorov-Smirnov test against N(0, 1) (optionally after standardizing)."""
    x = np.asarray(values, dtype=float).ravel()
    x = x[~np.isnan(x)]
    if x.size < 2:
        raise ValueError("need at least two values")
    if standardize:
        sd = x.std(ddof=1)
        if sd == 0:
            raise ValueError("values are constant")
        x = (x - x.mean()) / sd
    res = sps.kstest(x, "norm")
    return NormalityResult(float(res.statistic), float(res.pvalue), int(x.size))


def gamma_samples(M: int, N: int, count: int, seed: int = 0) -> np.ndarray:
    """Signal-power ratios of ``count`` independent Gaussian projections for random ``mu``."""
    out = np.empty(count)
    root = RngStream(seed, 7)
    for i in range(count):
        rng = root.child(i)
        A = gaussian_projection(M, N, rng)
        mu = rng.standard_normal(N)
        out[i] = gamma_coefficient(A, mu)
    return out


EXPERIMENTS = {
    "table1": run_table1,
    "timevarying": run_timevarying_tables,
    "curves": run_edd_curves,
    "baseline": run_baseline_comparison,
    "grid": run_power_grid,
}
