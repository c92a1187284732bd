"""Monte Carlo ARL / EDD estimation and simulation-based threshold calibration.

Every replicate draws its data from ``RngStream(root_seed, 1, (r,))`` in a
fixed schedule of chunk sizes, so replicate ``r`` sees the same noise path
whatever the threshold, the stopping level, the thread count, or whether the
GLR or the CUSUM baseline is being run (the two share the whitened noise).

A replicate is run once up to a stopping level and summarised by its
*record* sequence: the times at which the running maximum of the statistic
increases, with the new maxima. The alarm time at any threshold ``b`` not
above the stopping level is the first record exceeding ``b``, so one pass
yields the whole ARL-versus-``b`` curve. This is how calibration uses common
random numbers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp

from . import theory
from .detector import CusumBaseline, FixedSketchDetector, MissingDataDetector
from .numerics import RngStream, solve_lower
from .projections import (
    GridTopology,
    ProjectionMatrix,
    expander_projection,
    gaussian_projection,
    identity_projection,
    load_topology,
    synthetic_grid,
)

KINDS = ("fixed", "cusum", "timevarying", "grid")
PROJECTIONS = ("gaussian", "expander", "identity")
CHANGES = ("never", "start")

_PROJECTION_STREAM = 0
_REPLICATE_STREAM = 1
_NOISE, _MASK, _SUPPORT, _FRESH_A = 0, 1, 2, 3
_CHUNKS = (64, 128, 256, 512, 1024, 2048)
_CHUNK_MAX = 4096


class EstimationError(RuntimeError):
    """Monte Carlo estimate could not be formed (e.g. every replicate capped)."""


class CalibrationError(RuntimeError):
    """Simulation-based calibration failed to bracket the target."""


def default_threads() -> int:
    env = os.environ.get("SKETCHCPD_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class SimPlan:
    """Everything that determines a Monte Carlo run.

    ``kind`` selects the detector: ``fixed`` (whitened GLR on ``y = A x``),
    ``cusum`` (baseline on the same sketches), ``timevarying`` (``M`` random
    coordinates observed per step) or ``grid`` (``M`` random nodes of a network
    observed per step, each reporting the sum of its incident edges). For the
    grid, ``N`` is set from the topology's edge count.

    The post-change mean has ``round(mu_fraction * N)`` entries equal to
    ``mu_value`` (a random support per replicate unless the fraction is 1).
    ``change="never"`` simulates the null (ARL), ``"start"`` a change at time 0
    (EDD).
    """

    kind: str = "fixed"
    projection: str = "gaussian"
    N: int = 100
    M: int = 50
    window: int = 200
    threshold: float = math.inf
    degree: int = 0
    entry_variance: float = 0.0
    fresh_projection: bool = False
    mu_value: float = 0.0
    mu_fraction: float = 1.0
    change: str = "never"
    replicates: int = 2000
    target_arl: float = 5000.0
    horizon_cap: int = 0
    root_seed: int = 0
    threads: int = 1
    topology: str = ""
    grid_nodes: int = 200
    grid_edges: int = 300

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.change not in CHANGES:
            raise ValueError(f"change must be one of {CHANGES}, got {self.change!r}")
        if self.kind != "grid" and not 1 <= self.M <= self.N:
            raise ValueError(f"need 1 <= M <= N, got M={self.M}, N={self.N}")
        if self.window < 1 or self.replicates < 1 or self.threads < 1:
            raise ValueError("window, replicates and threads must be positive")
        if not 0.0 < self.mu_fraction <= 1.0:
            raise ValueError(f"mu_fraction must lie in (0, 1], got {self.mu_fraction}")
        if self.horizon_cap < 0 or not self.target_arl > 0:
            raise ValueError("horizon_cap must be >= 0 and target_arl positive")
        if self.projection == "expander" and self.kind in ("fixed", "cusum") and self.degree < 1:
            raise ValueError("expander projections need degree >= 1")

    @property
    def cap(self) -> int:
        """Horizon cap: explicit, or 20x the target ARL."""
        return self.horizon_cap or int(math.ceil(20 * self.target_arl))

    def with_(self, **changes) -> SimPlan:
        return replace(self, **changes)

    def to_config(self) -> str:
        """``key = value`` lines, readable by :meth:`from_mapping`."""
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> SimPlan:
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown plan keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _parse(types[k], v) for k, v in values.items()})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(typ: str, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


@dataclass(frozen=True)
class SimResult:
    mean: float
    stderr: float
    std: float
    replicates_used: int
    capped_count: int
    threshold: float = math.nan

    @property
    def clean(self) -> bool:
        return self.capped_count == 0

    @classmethod
    def from_times(cls, times: np.ndarray, capped: int, threshold: float) -> SimResult:
        times = np.asarray(times, dtype=float)
        n = times.size
        std = float(times.std(ddof=1)) if n > 1 else 0.0
        return cls(float(times.mean()), std / math.sqrt(n), std, n, int(capped), float(threshold))


@dataclass
class Records:
    """Running-maximum records of one replicate's statistic path."""

    times: np.ndarray
    values: np.ndarray
    horizon: int  # steps simulated
    stopped: bool  # True if the path crossed the stop level

    def alarm_time(self, b: float, cap: int) -> int:
        """First time the statistic exceeds ``b``; ``cap`` if it never does within the horizon."""
        hit = np.flatnonzero(self.values > b)
        return int(self.times[hit[0]]) if hit.size else cap

    def fired(self, b: float) -> bool:
        return bool(self.values.size) and bool(self.values.max() > b)


# ---------------------------------------------------------------------------
# per-plan shared context and per-replicate data


@dataclass
class _Context:
    plan: SimPlan
    projection: ProjectionMatrix | None = None
    topology: GridTopology | None = None
    node_matrix: sp.csr_matrix | None = None  # (nodes, edges) incidence
    node_scale: np.ndarray | None = None  # 1/sqrt(degree)
    eligible: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def signal_dim(self) -> int:
        return self.topology.edge_count if self.topology is not None else self.plan.N


def build_projection(plan: SimPlan, rng: RngStream) -> ProjectionMatrix:
    if plan.projection == "identity":
        return identity_projection(plan.N) if plan.M == plan.N else _identity_rows(plan.M, plan.N)
    if plan.projection == "expander":
        return expander_projection(plan.M, plan.N, plan.degree, rng)
    return gaussian_projection(plan.M, plan.N, rng, plan.entry_variance or None)


def _identity_rows(M: int, N: int) -> ProjectionMatrix:
    A = np.zeros((M, N))
    A[np.arange(M), np.arange(M)] = 1.0
    return ProjectionMatrix(A, kind="row_selection")


def build_topology(plan: SimPlan) -> GridTopology:
    if plan.topology:
        return load_topology(plan.topology)
    return synthetic_grid(plan.grid_nodes, plan.grid_edges, RngStream(plan.root_seed, _PROJECTION_STREAM, (1,)))


def _context(plan: SimPlan) -> _Context:
    ctx = _Context(plan)
    if plan.kind in ("fixed", "cusum") and not plan.fresh_projection:
        ctx.projection = build_projection(plan, RngStream(plan.root_seed, _PROJECTION_STREAM))
    if plan.kind == "grid":
        topo = build_topology(plan)
        deg = topo.degrees()
        E = topo.edge_count
        rows = np.concatenate([topo.edges[:, 0], topo.edges[:, 1]])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        ctx.topology = topo
        ctx.node_matrix = sp.csr_matrix((np.ones(2 * E), (rows, cols)), shape=(topo.node_count, E))
        ctx.node_scale = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1)), 0.0)
        ctx.eligible = np.flatnonzero(deg > 0)
        if not 1 <= plan.M <= ctx.eligible.size:
            raise ValueError(f"need 1 <= M <= {ctx.eligible.size} observable nodes, got M={plan.M}")
    return ctx


def _mean_vector(plan: SimPlan, dim: int, rng: RngStream) -> np.ndarray:
    mu = np.zeros(dim)
    if plan.change == "never" or plan.mu_value == 0.0:
        return mu
    k = int(round(plan.mu_fraction * dim))
    if k >= dim:
        mu[:] = plan.mu_value
    elif k > 0:
        mu[rng.child(_SUPPORT).generator.choice(dim, size=k, replace=False)] = plan.mu_value
    return mu


def _chunk_sizes():
    yield from _CHUNKS
    while True:
        yield _CHUNK_MAX


def _random_subsets(gen: np.random.Generator, T: int, pool: int, M: int) -> np.ndarray:
    """``T`` independent uniform ``M``-subsets of ``range(pool)`` as rows."""
    keys = gen.random((T, pool))
    if M == pool:
        return np.tile(np.arange(pool, dtype=np.int64), (T, 1))
    return np.argpartition(keys, M - 1, axis=1)[:, :M].astype(np.int64)


class _Replicate:
    """One replicate's detector plus its chunked data source."""

    def __init__(self, ctx: _Context, r: int) -> None:
        plan = ctx.plan
        self.plan = plan
        rng = RngStream(plan.root_seed, _REPLICATE_STREAM, (r,))
        self.noise = rng.child(_NOISE).generator
        self.masks = rng.child(_MASK).generator
        b = math.inf  # the stop level is passed explicitly to scan
        if plan.kind in ("fixed", "cusum"):
            A = ctx.projection if ctx.projection is not None else build_projection(plan, rng.child(_FRESH_A))
            mu = _mean_vector(plan, plan.N, rng)
            self.y_shift = A.entries @ mu
            self.z_shift = solve_lower(A.factor, self.y_shift)
            self.lower = A.factor.lower
            if plan.kind == "fixed":
                self.det = FixedSketchDetector(A.factor, plan.window, b)
            else:
                self.det = CusumBaseline(np.ones(plan.M), b)
        elif plan.kind == "timevarying":
            self.mu = _mean_vector(plan, plan.N, rng)
            self.det = MissingDataDetector(plan.N, plan.window, b, max_observed=plan.M)
        else:
            self.ctx = ctx
            mu = _mean_vector(plan, ctx.signal_dim, rng)
            self.node_mean = (ctx.node_matrix @ mu) * ctx.node_scale
            self.det = MissingDataDetector(ctx.topology.node_count, plan.window, b, max_observed=plan.M)

    def scan(self, T: int, stop: float) -> np.ndarray:
        plan = self.plan
        if plan.kind in ("fixed", "cusum"):
            e = self.noise.standard_normal((T, plan.M))
            if plan.kind == "fixed":
                return self.det.scan_whitened(e + self.z_shift, stop)[0]
            # same whitened noise, mapped back to sketch coordinates
            return self.det.scan(e @ self.lower.T + self.y_shift, stop)
        if plan.kind == "timevarying":
            idx = _random_subsets(self.masks, T, plan.N, plan.M)
            vals = self.noise.standard_normal((T, plan.M)) + self.mu[idx]
            return self.det.scan(idx, vals, np.full(T, plan.M), stop)[0]
        ctx = self.ctx
        nodes = ctx.eligible[_random_subsets(self.masks, T, ctx.eligible.size, plan.M)]
        x = self.noise.standard_normal((T, ctx.signal_dim))
        y = np.asarray((ctx.node_matrix @ x.T).T)  # every node's edge sum
        vals = np.take_along_axis(y, nodes, axis=1) * ctx.node_scale[nodes] + self.node_mean[nodes]
        return self.det.scan(nodes, vals, np.full(T, plan.M), stop)[0]


def _records(ctx: _Context, r: int, stop: float, cap: int) -> Records:
    rep = _Replicate(ctx, r)
    t = 0
    best = -math.inf
    rec_t: list[np.ndarray] = []
    rec_v: list[np.ndarray] = []
    for size in _chunk_sizes():
        T = min(size, cap - t)
        if T <= 0:
            break
        stats = rep.scan(T, stop)
        prev = np.maximum.accumulate(np.concatenate(([best], stats)))[:-1]
        new = np.flatnonzero(stats > prev)
        if new.size:
            rec_t.append(t + 1 + new)
            rec_v.append(stats[new])
            best = float(stats[new[-1]])
        t += stats.size
        if best > stop:
            return _pack(rec_t, rec_v, t, True)
    return _pack(rec_t, rec_v, t, False)


def _pack(rec_t, rec_v, horizon, stopped) -> Records:
    if rec_t:
        return Records(np.concatenate(rec_t), np.concatenate(rec_v), horizon, stopped)
    return Records(np.zeros(0, dtype=np.int64), np.zeros(0), horizon, stopped)


def simulate_records(plan: SimPlan, stop: float, threads: int | None = None) -> list[Records]:
    """Record sequences of every replicate, run until the statistic exceeds ``stop`` or the cap."""
    ctx = _context(plan)
    cap = plan.cap
    n_threads = threads or plan.threads
    if n_threads <= 1:
        return [_records(ctx, r, stop, cap) for r in range(plan.replicates)]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda r: _records(ctx, r, stop, cap), range(plan.replicates)))


def _summarise(records: list[Records], b: float, cap: int) -> SimResult:
    times = np.array([rec.alarm_time(b, cap) for rec in records], dtype=float)
    capped = sum(1 for rec in records if not rec.fired(b))
    if capped == len(records):
        raise EstimationError(f"all {len(records)} replicates reached the horizon cap {cap} without an alarm")
    return SimResult.from_times(times, capped, b)


def simulate(plan: SimPlan) -> SimResult:
    """Mean alarm time at ``plan.threshold`` under ``plan.change``."""
    if math.isnan(plan.threshold):
        raise ValueError("plan threshold is NaN")
    records = simulate_records(plan, plan.threshold)
    return _summarise(records, plan.threshold, plan.cap)


def simulate_arl(plan: SimPlan) -> SimResult:
    """Average run length: no change ever occurs."""
    return simulate(plan.with_(change="never"))


def simulate_edd(plan: SimPlan) -> SimResult:
    """Expected detection delay with the change active from the first sample."""
    if plan.mu_value == 0.0:
        raise ValueError("EDD needs a nonzero post-change mean (mu_value)")
    return simulate(plan.with_(change="start"))


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class Calibration:
    b: float
    estimate: SimResult
    expansions: int


def arl_curve(records: list[Records], b: float, cap: int) -> float:
    return float(np.mean([rec.alarm_time(b, cap) for rec in records]))


def _initial_guess(plan: SimPlan, target: float) -> float:
    try:
        if plan.kind == "fixed":
            return theory.calibrate_b(plan.M, plan.window, target)
        if plan.kind == "timevarying":
            return theory.calibrate_b_timevarying(plan.N, plan.M, plan.window, target)
        if plan.kind == "grid":
            nodes = plan.grid_nodes if not plan.topology else load_topology(plan.topology).node_count
            return theory.calibrate_b_timevarying(nodes, plan.M, plan.window, target)
    except (theory.TheoryDomainError, ValueError):
        pass
    return max(1.0, 0.5 * plan.M + math.log(target))


def calibrate_b_mc(
    plan: SimPlan, target_arl: float, rel_tol: float = 0.01, max_expansions: int = 30
) -> Calibration:
    """Threshold whose simulated ARL is within ``rel_tol`` of ``target_arl``.

    All candidate thresholds are evaluated on the same replicate paths. The
    paths are simulated once up to a stop level; if the ARL at the stop level
    is still short of the target, the level is raised and the paths re-run
    (identically, up to the old level). Bisection then runs on the record
    sequences alone. Because the simulated ARL is a step function of ``b``,
    bisection also ends when the bracket has shrunk to a single jump.
    """
    if rel_tol < 0.01:
        raise ValueError(f"rel_tol must be at least 0.01, got {rel_tol}")
    if not target_arl > 1.0:
        raise ValueError(f"target ARL must exceed 1, got {target_arl}")
    plan = plan.with_(change="never", target_arl=target_arl)
    cap = plan.cap
    stop = _initial_guess(plan, target_arl) * 1.02 + 0.5
    for expansion in range(max_expansions + 1):
        records = simulate_records(plan, stop)
        if arl_curve(records, stop, cap) >= target_arl:
            break
        stop = stop * 1.25 + 1.0
    else:
        raise CalibrationError(f"simulated ARL stayed below {target_arl} up to b={stop:.4g}")
    lo, hi = 0.0, stop
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        arl = arl_curve(records, mid, cap)
        if abs(arl - target_arl) <= rel_tol * target_arl:
            lo = hi = mid
            break
        if arl < target_arl:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-9 * max(1.0, hi):
            break
    b = hi if lo != hi else lo
    return Calibration(b, _summarise(records, b, cap), expansion)
