import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sketchcpd.numerics import NotPositiveDefiniteError, RngStream
from sketchcpd.projections import (
    GridTopology,
    ObservationMask,
    ProjectionMatrix,
    expander_gamma_lower_bound,
    expander_projection,
    gamma_coefficient,
    gamma_law_params,
    gaussian_projection,
    identity_projection,
    load_projection,
    load_topology,
    save_projection,
    save_topology,
    sigma_max,
    subsample_mask,
    synthetic_grid,
    topology_projection,
)


def test_gaussian_entry_variance_and_determinism():
    A = gaussian_projection(200, 400, RngStream(5))
    assert A.kind == "gaussian"
    assert A.entries.var() == pytest.approx(1 / 400, rel=0.02)
    B = gaussian_projection(200, 400, RngStream(5))
    assert np.array_equal(A.entries, B.entries)
    assert gaussian_projection(3, 5, RngStream(1), entry_variance=4.0).entries.std() > 0.5


def test_entries_are_read_only():
    A = identity_projection(3)
    with pytest.raises(ValueError):
        A.entries[0, 0] = 2.0


@pytest.mark.parametrize("M,N,d", [(50, 100, 3), (30, 500, 3), (10, 40, 2), (100, 500, 5)])
def test_expander_is_biregular_and_simple(M, N, d):
    A = expander_projection(M, N, d, RngStream(M + N)).entries
    assert set(np.unique(A)) <= {0.0, 1.0}
    assert np.all(A.sum(axis=0) == d)
    assert np.all(A.sum(axis=1) == N * d // M)


def test_expander_rejects_bad_degrees():
    with pytest.raises(ValueError):
        expander_projection(30, 100, 1, RngStream(0))  # 100 not divisible by 30
    with pytest.raises(ValueError):
        expander_projection(10, 20, 11, RngStream(0))


def test_custom_rank_deficient_rejected():
    with pytest.raises(NotPositiveDefiniteError):
        ProjectionMatrix(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_projection_roundtrip(tmp_path):
    for P in (gaussian_projection(4, 7, RngStream(2)), expander_projection(4, 8, 2, RngStream(3))):
        path = tmp_path / f"{P.kind}.csv"
        save_projection(P, path)
        Q = load_projection(path)
        assert np.array_equal(P.entries, Q.entries)
        assert (Q.kind, Q.column_degree, Q.row_degree) == (P.kind, P.column_degree, P.row_degree)


def test_masks():
    m = subsample_mask(20, 7, RngStream(1))
    assert m.size == 7 and np.all(np.diff(m.observed) > 0)
    A = m.as_projection()
    assert np.array_equal(A.entries @ np.arange(20.0), m.observed.astype(float))
    with pytest.raises(ValueError):
        ObservationMask(5, [0, 0])
    with pytest.raises(ValueError):
        ObservationMask(5, [5])


def test_topology_file_roundtrip(tmp_path):
    path = tmp_path / "g.edges"
    path.write_text("# comment\n1 2\n2 3  # trailing\n\n3 4\n")
    topo = load_topology(path)
    assert topo.node_count == 4 and topo.edge_count == 3
    assert topo.degrees().tolist() == [1, 2, 2, 1]
    save_topology(topo, tmp_path / "h.edges")
    assert np.array_equal(load_topology(tmp_path / "h.edges").edges, topo.edges)


@pytest.mark.parametrize("text,lineno", [("1 2\n3\n", 2), ("1 2\nx 3\n", 2), ("0 1\n", 1)])
def test_topology_errors_carry_line_numbers(tmp_path, text, lineno):
    path = tmp_path / "bad.edges"
    path.write_text(text)
    with pytest.raises(ValueError, match=f":{lineno}:"):
        load_topology(path)


def test_topology_projection_rows_are_incidence_vectors():
    topo = synthetic_grid(30, 45, RngStream(4))
    assert topo.degrees().min() >= 1
    P = topology_projection(topo, 8, RngStream(5))
    deg = topo.degrees()
    assert set(np.unique(P.entries)) <= {0.0, 1.0}
    assert all(int(row.sum()) in set(deg.tolist()) for row in P.entries)
    inc = topo.incidence()
    for v in range(topo.node_count):
        assert set(inc[v].tolist()) == set(np.flatnonzero(topo.incidence_rows([v])[0]).tolist())


def test_gamma_identity_and_bounds():
    mu = np.arange(1.0, 6.0)
    assert gamma_coefficient(identity_projection(5), mu) == pytest.approx(1.0)
    A = gaussian_projection(3, 5, RngStream(0))
    assert 0.0 <= gamma_coefficient(A, mu) <= 1.0
    with pytest.raises(ValueError):
        gamma_coefficient(A, np.zeros(5))


def test_gamma_matches_svd_definition():
    # ||V^T mu||^2 with V the right singular vectors, computed independently by SVD
    A = gaussian_projection(6, 15, RngStream(9))
    mu = RngStream(10).standard_normal(15)
    _, _, Vt = np.linalg.svd(A.entries, full_matrices=False)
    assert gamma_coefficient(A, mu) == pytest.approx(np.sum((Vt @ mu) ** 2) / (mu @ mu), rel=1e-10)


def test_gamma_law_params():
    law = gamma_law_params(10, 40)
    assert (law.alpha, law.beta, law.mean) == (5.0, 15.0, 0.25)
    assert gamma_law_params(5, 5).degenerate


def test_gamma_concentrates_as_N_grows():
    # Gamma concentrates around M/N with fixed ratio 0.25 as N grows
    spreads = []
    for N in (40, 400):
        M = N // 4
        g = [gamma_coefficient(gaussian_projection(M, N, RngStream(N, 1, (i,))), np.ones(N)) for i in range(300)]
        spreads.append(np.std(g))
    assert spreads[1] < spreads[0] / 2


def test_expander_gamma_floor_for_nonnegative_means():
    A = expander_projection(20, 100, 4, RngStream(1))
    floor = expander_gamma_lower_bound(20, 100, 4)
    gen = np.random.default_rng(0)
    for _ in range(200):
        mu = gen.exponential(size=100) * (gen.random(100) < 0.3)
        if mu.sum() == 0:
            continue
        assert gamma_coefficient(A, mu) >= floor * (1 - 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 5), st.integers(0, 10_000))
def test_sigma_max_matches_svd(M, extra, seed):
    A = RngStream(seed).standard_normal((M, M + extra))
    assert sigma_max(A, tol=1e-13) == pytest.approx(np.linalg.norm(A, 2), rel=1e-5)


def test_grid_topology_validation():
    with pytest.raises(ValueError):
        GridTopology(3, [[0, 0]])
    with pytest.raises(ValueError):
        GridTopology(2, [[0, 2]])
