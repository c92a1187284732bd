"""Sketching operators and the signal-power ratio they retain.

Constructors return immutable :class:`ProjectionMatrix` values whose ``A A^T``
has already been checked for positive definiteness, so detectors can whiten
without re-validating.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .numerics import NotPositiveDefiniteError, RngStream, SpdFactor, cholesky_spd

logger = logging.getLogger(__name__)

KINDS = ("gaussian", "expander", "identity", "row_selection", "topology", "custom")


class ConstructionError(RuntimeError):
    """A randomized constructor gave up after its retry budget."""

    def __init__(self, message: str, retries: int) -> None:
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


@dataclass(frozen=True)
class ProjectionMatrix:
    """An M x N sensing operator with a kind tag.

    ``factor`` is the Cholesky factor of ``A A^T``; it doubles as the whitener
    used by the fixed-projection detector.
    """

    entries: np.ndarray
    kind: str = "custom"
    column_degree: int | None = None
    row_degree: int | None = None
    seed: int | None = None
    factor: SpdFactor = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        A = np.array(self.entries, dtype=float)
        if A.ndim != 2 or A.shape[0] < 1:
            raise ValueError(f"projection must be a non-empty 2-D array, got shape {A.shape}")
        if A.shape[0] > A.shape[1]:
            raise ValueError(f"projection needs M <= N, got {A.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind == "expander":
            _check_biregular(A, self.column_degree, self.row_degree)
        elif self.kind == "row_selection":
            ones = A == 1.0
            if not (np.all(ones | (A == 0.0)) and np.all(ones.sum(axis=1) == 1)):
                raise ValueError("row_selection rows must each hold exactly one 1")
            if len(set(np.argmax(A, axis=1).tolist())) != A.shape[0]:
                raise ValueError("row_selection rows must select distinct coordinates")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)
        object.__setattr__(self, "factor", cholesky_spd(A @ A.T))

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    def scaled(self, c: float) -> ProjectionMatrix:
        return ProjectionMatrix(self.entries * c, kind="custom")


def _check_biregular(A: np.ndarray, d: int | None, c: int | None) -> None:
    if d is None or c is None:
        raise ValueError("expander projections need column_degree and row_degree")
    if not np.all((A == 0.0) | (A == 1.0)):
        raise ValueError("expander entries must be 0 or 1")
    M, N = A.shape
    if N * d != M * c:
        raise ValueError(f"degree counts disagree: N*d={N * d}, M*c={M * c}")
    if not np.all(A.sum(axis=0) == d):
        raise ValueError(f"every column must sum to {d}")
    if not np.all(A.sum(axis=1) == c):
        raise ValueError(f"every row must sum to {c}")


# ---------------------------------------------------------------------------
# constructors


def gaussian_projection(
    M: int,
    N: int,
    rng: RngStream,
    entry_variance: float | None = None,
    max_retries: int = 100,
) -> ProjectionMatrix:
    """I.i.d. ``N(0, entry_variance)`` entries; the variance defaults to ``1/N``.

    A rank-deficient draw (probability zero in exact arithmetic) is redrawn.
    """
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    var = 1.0 / N if entry_variance is None else float(entry_variance)
    if var <= 0:
        raise ValueError("entry_variance must be positive")
    scale = np.sqrt(var)
    for attempt in range(max_retries + 1):
        A = rng.standard_normal((M, N)) * scale
        try:
            return ProjectionMatrix(A, kind="gaussian", seed=rng.root_seed)
        except NotPositiveDefiniteError:
            logger.debug("gaussian draw %d was rank deficient, redrawing", attempt)
    raise ConstructionError("could not draw a full-rank Gaussian projection", max_retries)


def expander_projection(
    M: int,
    N: int,
    d: int,
    rng: RngStream,
    max_retries: int = 1000,
    max_swaps: int | None = None,
) -> ProjectionMatrix:
    """Random 0-1 biregular matrix: every column sums to ``d``, every row to ``N*d/M``.

    Configuration model: ``d`` stubs per column, ``c`` stubs per row, joined by a
    uniformly random perfect matching. Duplicate edges are removed by
    degree-preserving double-edge swaps; if the swaps stall, or the result is
    rank deficient, the whole matching is redrawn (at most ``max_retries`` times).
    """
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    if not 1 <= d <= M:
        raise ValueError(f"column degree must satisfy 1 <= d <= M, got d={d}")
    if (N * d) % M:
        raise ValueError(f"N*d = {N * d} is not divisible by M = {M}")
    c = N * d // M
    if c > N:
        raise ValueError(f"row degree {c} exceeds N={N}")
    gen = rng.generator
    cols = np.repeat(np.arange(N), d)
    row_stubs = np.repeat(np.arange(M), c)
    swaps_budget = max_swaps if max_swaps is not None else 50 * N * d
    for attempt in range(max_retries + 1):
        rows = gen.permutation(row_stubs)
        if _repair_duplicates(rows, cols, M, gen, swaps_budget):
            A = np.zeros((M, N))
            A[rows, cols] = 1.0
            try:
                return ProjectionMatrix(A, kind="expander", column_degree=d, row_degree=c, seed=rng.root_seed)
            except NotPositiveDefiniteError:
                logger.debug("expander draw %d rank deficient, redrawing", attempt)
    raise ConstructionError(f"no simple biregular graph for M={M}, N={N}, d={d}", max_retries)


def _repair_duplicates(rows: np.ndarray, cols: np.ndarray, M: int, gen: np.random.Generator, budget: int) -> bool:
    """Swap row endpoints of duplicate edges in place. Returns True when simple."""
    E = rows.size
    key = rows.astype(np.int64) * (cols.max() + 1) + cols
    counts: dict[int, int] = {}
    for k in key.tolist():
        counts[k] = counts.get(k, 0) + 1
    ncol = int(cols.max()) + 1
    for _ in range(budget):
        dups = [i for i in range(E) if counts[int(key[i])] > 1]
        if not dups:
            return True
        i = dups[int(gen.integers(len(dups)))]
        j = int(gen.integers(E))
        ri, ci, rj, cj = int(rows[i]), int(cols[i]), int(rows[j]), int(cols[j])
        if ri == rj or ci == cj:
            continue
        new_i = rj * ncol + ci
        new_j = ri * ncol + cj
        if counts.get(new_i, 0) or counts.get(new_j, 0):
            continue
        for old in (ri * ncol + ci, rj * ncol + cj):
            counts[old] -= 1
        counts[new_i] = 1
        counts[new_j] = 1
        rows[i], rows[j] = rj, ri
        key[i], key[j] = new_i, new_j
    return not any(v > 1 for v in counts.values())


def identity_projection(N: int) -> ProjectionMatrix:
    return ProjectionMatrix(np.eye(N), kind="identity")


@dataclass(frozen=True)
class ObservationMask:
    """Sorted distinct observed coordinates (zero-based) out of ``N``."""

    N: int
    observed: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.observed, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("observed indices must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= self.N):
            raise ValueError(f"observed index out of range [0, {self.N})")
        idx = np.sort(idx)
        if np.any(np.diff(idx) == 0):
            raise ValueError("observed indices must be distinct")
        idx.setflags(write=False)
        object.__setattr__(self, "observed", idx)

    @property
    def size(self) -> int:
        return int(self.observed.size)

    def as_projection(self) -> ProjectionMatrix:
        A = np.zeros((self.size, self.N))
        A[np.arange(self.size), self.observed] = 1.0
        return ProjectionMatrix(A, kind="row_selection")


def subsample_mask(N: int, M_t: int, rng: RngStream) -> ObservationMask:
    """Uniformly random ``M_t``-subset of ``range(N)`` (without replacement)."""
    if not 1 <= M_t <= N:
        raise ValueError(f"need 1 <= M_t <= N, got M_t={M_t}, N={N}")
    return ObservationMask(N, rng.generator.choice(N, size=M_t, replace=False))


# ---------------------------------------------------------------------------
# network topologies


@dataclass(frozen=True)
class GridTopology:
    """Undirected graph; edge ``e`` is ``edges[e]`` with zero-based endpoints."""

    node_count: int
    edges: np.ndarray

    def __post_init__(self) -> None:
        E = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if E.shape[0] == 0:
            raise ValueError("topology needs at least one edge")
        if E.min() < 0 or E.max() >= self.node_count:
            raise ValueError("edge endpoint out of range")
        if np.any(E[:, 0] == E[:, 1]):
            raise ValueError("self-loops are not allowed")
        E.setflags(write=False)
        object.__setattr__(self, "edges", E)

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.node_count)

    def incidence(self) -> list[np.ndarray]:
        """Per-node arrays of incident edge indices."""
        order = np.argsort(np.concatenate([self.edges[:, 0], self.edges[:, 1]]), kind="stable")
        edge_ids = np.concatenate([np.arange(self.edge_count)] * 2)[order]
        bounds = np.concatenate([[0], np.cumsum(self.degrees())])
        return [edge_ids[bounds[v] : bounds[v + 1]] for v in range(self.node_count)]

    def incidence_rows(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        A = np.zeros((nodes.size, self.edge_count))
        for i, v in enumerate(nodes.tolist()):
            A[i, self.edges[:, 0] == v] = 1.0
            A[i, self.edges[:, 1] == v] = 1.0
        return A


def load_topology(path: str | Path) -> GridTopology:
    """Read a whitespace-separated edge list with 1-based node ids; '#' starts a comment."""
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'node_a node_b', got {raw!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: node ids must be integers") from None
        if a < 1 or b < 1:
            raise ValueError(f"{path}:{lineno}: node ids are 1-based")
        pairs.append((a - 1, b - 1))
    if not pairs:
        raise ValueError(f"{path}: no edges found")
    edges = np.array(pairs, dtype=np.int64)
    return GridTopology(int(edges.max()) + 1, edges)


def save_topology(topology: GridTopology, path: str | Path) -> None:
    lines = [f"# {topology.node_count} nodes, {topology.edge_count} edges"]
    lines += [f"{a + 1} {b + 1}" for a, b in topology.edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_grid(node_count: int, edge_count: int, rng: RngStream) -> GridTopology:
    """Sparse connected graph with minimum degree 1.

    A random recursive tree (each new node attaches to a uniformly chosen
    earlier node) supplies ``node_count - 1`` edges; the rest are uniformly
    random non-duplicate chords. Stands in for a real transmission network of
    similar size and sparsity.
    """
    if node_count < 2:
        raise ValueError("need at least two nodes")
    if not node_count - 1 <= edge_count <= node_count * (node_count - 1) // 2:
        raise ValueError(f"edge_count must lie in [{node_count - 1}, {node_count * (node_count - 1) // 2}]")
    gen = rng.generator
    parents = np.array([gen.integers(v) for v in range(1, node_count)], dtype=np.int64)
    edges = [(int(p), v) for v, p in zip(range(1, node_count), parents)]
    seen = {(min(a, b), max(a, b)) for a, b in edges}
    while len(edges) < edge_count:
        a, b = (int(x) for x in gen.integers(node_count, size=2))
        if a == b:
            continue
        pair = (min(a, b), max(a, b))
        if pair in seen:
            continue
        seen.add(pair)
        edges.append(pair)
    return GridTopology(node_count, np.array(edges, dtype=np.int64))


def topology_projection(topology: GridTopology, M: int, rng: RngStream, max_retries: int = 1000) -> ProjectionMatrix:
    """Rows are incidence vectors of ``M`` random distinct nodes (degree >= 1).

    Entry ``(i, e)`` is 1 iff edge ``e`` touches the ``i``-th selected node. A
    selection with singular ``A A^T`` is redrawn.
    """
    deg = topology.degrees()
    eligible = np.flatnonzero(deg > 0)
    if not 1 <= M <= eligible.size:
        raise ValueError(f"need 1 <= M <= {eligible.size} nodes with degree >= 1, got M={M}")
    gen = rng.generator
    for attempt in range(max_retries + 1):
        nodes = np.sort(gen.choice(eligible, size=M, replace=False))
        try:
            return ProjectionMatrix(topology.incidence_rows(nodes), kind="topology", seed=rng.root_seed)
        except NotPositiveDefiniteError:
            logger.debug("node selection %d gave singular AA^T, redrawing", attempt)
    raise ConstructionError("no node selection with full-rank incidence", max_retries)


# ---------------------------------------------------------------------------
# signal-power ratio


@dataclass(frozen=True)
class GammaLaw:
    """Beta law of the retained signal fraction under a Gaussian projection."""

    alpha: float
    beta: float
    mean: float
    degenerate: bool = False


def gamma_coefficient(A: ProjectionMatrix | np.ndarray, mu: np.ndarray) -> float:
    """Fraction ``||V^T mu||^2 / ||mu||^2`` of the mean energy seen through ``A``.

    Computed as ``mu^T A^T (A A^T)^{-1} A mu / ||mu||^2`` using the stored
    Cholesky factor, which equals the squared norm of the whitened sketch mean.
    """
    if not isinstance(A, ProjectionMatrix):
        A = ProjectionMatrix(A)
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (A.N,):
        raise ValueError(f"mu must have length {A.N}")
    energy = float(mu @ mu)
    if energy == 0.0:
        raise ValueError("gamma is undefined for a zero mean vector")
    z = solve_triangular(A.factor.lower, A.entries @ mu, lower=True, check_finite=False)
    return float(min(max(z @ z / energy, 0.0), 1.0))


def gamma_law_params(M: int, N: int) -> GammaLaw:
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    if M == N:
        return GammaLaw(M / 2, 0.0, 1.0, degenerate=True)
    return GammaLaw(M / 2, (N - M) / 2, M / N)


def expander_gamma_lower_bound(M: int, N: int, d: int, epsilon: float = 0.0) -> float:
    """Deterministic floor ``M(1-eps)/(dN)`` on gamma for nonnegative means."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    if d < 1:
        raise ValueError("d must be at least 1")
    return M * (1.0 - epsilon) / (d * N)


def sigma_max(A: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, rng: RngStream | None = None) -> float:
    """Largest singular value by power iteration on ``A^T A``.

    Starts from the all-ones vector plus a small random perturbation, and stops
    when successive Rayleigh-quotient estimates agree to ``tol`` (relative).
    """
    A = np.asarray(A, dtype=float)
    gen = (rng or RngStream(0)).generator
    x = np.ones(A.shape[1]) + 1e-3 * gen.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = A.T @ (A @ x)
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(new - est) <= tol * max(new, 1e-300):
            est = new
            break
        est = new
    return float(np.sqrt(est))


# ---------------------------------------------------------------------------
# export / import


_HEADER = "kind,M,N,d,c,seed"


def save_projection(P: ProjectionMatrix, path: str | Path) -> None:
    """CSV: the header line, one metadata line, then ``M`` rows of entries."""

    def opt(v):
        return "" if v is None else str(v)

    lines = [_HEADER, ",".join([P.kind, str(P.M), str(P.N), opt(P.column_degree), opt(P.row_degree), opt(P.seed)])]
    lines += [",".join(repr(float(x)) for x in row) for row in P.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_projection(path: str | Path) -> ProjectionMatrix:
    text = Path(path).read_text().splitlines()
    if len(text) < 2 or text[0].strip() != _HEADER:
        raise ValueError(f"{path}: first line must be {_HEADER!r}")
    kind, M, N, d, c, seed = (s.strip() for s in text[1].split(","))
    M, N = int(M), int(N)
    rows = [r for r in text[2:] if r.strip()]
    if len(rows) != M:
        raise ValueError(f"{path}: expected {M} entry rows, found {len(rows)}")
    A = np.array([[float(x) for x in r.split(",")] for r in rows])
    if A.shape != (M, N):
        raise ValueError(f"{path}: entries have shape {A.shape}, header says ({M}, {N})")
    return ProjectionMatrix(
        A,
        kind=kind,
        column_degree=int(d) if d else None,
        row_degree=int(c) if c else None,
        seed=int(seed) if seed else None,
    )
