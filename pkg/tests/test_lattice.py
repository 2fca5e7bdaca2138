import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hamlearn.exceptions import ConfigurationError, DegenerateGeometryError
from hamlearn.lattice import (
    C6_DEFAULT,
    CouplingMatrix,
    Geometry,
    adjacency,
    build_geometry,
    couplings,
    edge_displacements,
)


def test_zero_disorder_gives_exact_spacing():
    geom = build_geometry(3, 3, 10.0, 0.0, 123)
    adj = adjacency(3, 3)
    d = geom.distances()
    np.testing.assert_array_equal(d[adj.nn_edges[:, 0], adj.nn_edges[:, 1]], 10.0)


def test_seeded_geometry_is_bit_identical():
    a = build_geometry(2, 3, 10.0, 0.1, 42)
    b = build_geometry(2, 3, 10.0, 0.1, 42)
    assert a.positions_um.tobytes() == b.positions_um.tobytes()
    c = build_geometry(2, 3, 10.0, 0.1, 43)
    assert not np.array_equal(a.positions_um, c.positions_um)


def test_index_to_lattice_coordinates():
    geom = build_geometry(2, 3, 10.0, 0.0, 0)
    # atom i sits at column i % cols, row i // cols
    np.testing.assert_array_equal(geom.positions_um[4], [10.0, 10.0])
    np.testing.assert_array_equal(geom.positions_um[2], [20.0, 0.0])


def test_nn_perturbation_bracket_5x5():
    geom = build_geometry(5, 5, 10.0, 0.1, 9)
    adj = adjacency(5, 5)
    dr = edge_displacements(geom, adj.nn_edges, 10.0)
    assert np.all(np.abs(dr) <= np.sqrt(10.2**2 + 0.2**2) - 10.0)


@given(
    rows=st.integers(1, 5),
    cols=st.integers(1, 5),
    amp=st.floats(0.0, 0.4),
    seed=st.integers(0, 2**32),
)
def test_disorder_bounds(rows, cols, amp, seed):
    a = 10.0
    geom = build_geometry(rows, cols, a, amp, seed)
    assert np.all(np.abs(geom.positions_um - geom.nominal_positions()) <= amp)
    adj = adjacency(rows, cols)
    if len(adj.nn_edges):
        dr = edge_displacements(geom, adj.nn_edges, a)
        assert np.all(np.abs(dr) <= 2 * amp + (2 * amp) ** 2 / (2 * a) + 1e-12)


@pytest.mark.parametrize(
    "args",
    [(0, 3, 10.0, 0.1), (3, 0, 10.0, 0.1), (2, 2, -1.0, 0.1), (2, 2, 10.0, 5.0), (2, 2, 10.0, -0.1), (2.5, 2, 10.0, 0.1)],
)
def test_invalid_geometry_rejected(args):
    with pytest.raises(ConfigurationError):
        build_geometry(*args, seed=0)


def test_coupling_constant_at_10um():
    geom = build_geometry(1, 2, 10.0, 0.0, 0)
    j = couplings(geom, C6_DEFAULT)
    assert j.j_rad_per_us[0, 1] == pytest.approx(5.42, rel=1e-15)
    np.testing.assert_array_equal(j.j_rad_per_us, [[0.0, j.j_rad_per_us[0, 1]], [j.j_rad_per_us[0, 1], 0.0]])


def test_doubling_distance_divides_by_64():
    j10 = couplings(build_geometry(1, 2, 10.0, 0.0, 0)).j_rad_per_us[0, 1]
    j20 = couplings(build_geometry(1, 2, 20.0, 0.0, 0)).j_rad_per_us[0, 1]
    assert j10 / j20 == pytest.approx(64.0, rel=1e-14)


@given(seed=st.integers(0, 2**32), rows=st.integers(1, 4), cols=st.integers(2, 4))
def test_coupling_matrix_invariants(seed, rows, cols):
    geom = build_geometry(rows, cols, 10.0, 0.3, seed)
    j = couplings(geom).j_rad_per_us
    np.testing.assert_array_equal(j, j.T)
    assert np.all(np.diag(j) == 0)
    off = ~np.eye(j.shape[0], dtype=bool)
    assert np.all(j[off] > 0)
    # monotone decreasing in distance
    r = geom.distances()[off]
    order = np.argsort(r)
    assert np.all(np.diff(j[off][order]) <= 0)


def test_clean_lattice_has_equal_nn_couplings():
    geom = build_geometry(4, 4, 9.0, 0.0, 0)
    adj = adjacency(4, 4)
    j = couplings(geom).j_rad_per_us[adj.nn_edges[:, 0], adj.nn_edges[:, 1]]
    assert np.ptp(j) <= 1e-15 * j.max()


def test_coincident_atoms_raise():
    geom = build_geometry(1, 2, 10.0, 0.0, 0)
    pos = geom.positions_um.copy()
    pos[1] = pos[0]
    bad = Geometry(1, 2, 10.0, 0.0, 0, pos)
    with pytest.raises(DegenerateGeometryError):
        couplings(bad)


def test_coupling_matrix_validation():
    with pytest.raises(ConfigurationError):
        CouplingMatrix.from_array([[0, 1], [2, 0]])
    with pytest.raises(ConfigurationError):
        CouplingMatrix.from_array([[1, 1], [1, 0]])
    with pytest.raises(ConfigurationError):
        CouplingMatrix.from_array([1, 2, 3])


@pytest.mark.parametrize("rows,cols,n_nn,n_nnn", [(3, 3, 12, 8), (4, 4, 24, 18), (1, 5, 4, 0)])
def test_adjacency_examples(rows, cols, n_nn, n_nnn):
    adj = adjacency(rows, cols)
    assert len(adj.nn_edges) == n_nn
    assert len(adj.nnn_edges) == n_nnn


def test_adjacency_counts_exhaustive():
    for rows in range(1, 13):
        for cols in range(1, 13):
            adj = adjacency(rows, cols)
            assert len(adj.nn_edges) == rows * (cols - 1) + cols * (rows - 1)
            assert len(adj.nnn_edges) == 2 * (rows - 1) * (cols - 1)
            idx = np.arange(rows * cols)
            x, y = idx % cols, idx // cols
            if len(adj.nn_edges):
                i, j = adj.nn_edges.T
                assert np.all(np.abs(x[i] - x[j]) + np.abs(y[i] - y[j]) == 1)
                assert np.all(i < j)
            if len(adj.nnn_edges):
                i, j = adj.nnn_edges.T
                assert np.all((np.abs(x[i] - x[j]) == 1) & (np.abs(y[i] - y[j]) == 1))
            assert len({tuple(e) for e in adj.nn_edges}) == len(adj.nn_edges)


def test_geometry_json_roundtrip():
    geom = build_geometry(2, 3, 10.0, 0.1, 42)
    rec = json.loads(geom.dumps())
    assert set(rec) >= {"rows", "cols", "spacing_um", "seed", "positions"}
    back = Geometry.from_json(rec)
    assert back.positions_um.tobytes() == geom.positions_um.tobytes()
    assert back.seed == geom.seed and back.nominal_spacing_um == geom.nominal_spacing_um
