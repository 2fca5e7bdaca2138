import json

import numpy as np
import pytest

from hamlearn.dataset import (
    CASES,
    DatasetFile,
    ObservationMode,
    OmegaHistory,
    assemble_graph,
    data_dir,
    expand_per_omega,
    feature_widths,
    generate_dataset,
    parse_case,
    parse_size,
    recast_case,
    split_dataset,
)
from hamlearn.exceptions import ConfigurationError, ContractError
from hamlearn.lattice import adjacency, build_geometry, couplings
from hamlearn.spectral import exact_observables, ground_state


def test_default_omega_history():
    om = OmegaHistory.default()
    assert len(om) == 10
    np.testing.assert_allclose(om.values, [(-900 + 200 * k) / 9 for k in range(10)], rtol=0, atol=1e-12)
    assert om.values[0] == pytest.approx(-100.0) and om.values[-1] == pytest.approx(100.0)


@pytest.mark.parametrize("values", [(), (1.0, 1.0), (2.0, 1.0)])
def test_omega_history_validation(values):
    with pytest.raises(ConfigurationError):
        OmegaHistory(values)


def test_parsers():
    assert parse_size("3x4") == (3, 4)
    assert parse_case(6) == 6 and parse_case("#6") == 6
    for bad in ("0", "7", "x"):
        with pytest.raises(ConfigurationError):
            parse_case(bad)
    with pytest.raises(ConfigurationError):
        parse_size("3by4")
    assert ObservationMode.parse("exact").provenance == "exact"
    m = ObservationMode.parse("snapshot:10000:zx", "split")
    assert (m.n_samples, m.bases, m.per_basis_samples(), m.provenance) == (10000, "zx", 5000, "snapshot(10000)")
    assert ObservationMode.parse("snapshot:100").per_basis_samples() == 100
    for bad in ("snapshot", "snapshot:-1", "snapshot:10:y", "approx"):
        with pytest.raises(ConfigurationError):
            ObservationMode.parse(bad)


def _observations(rows, cols, seed=3, with_x=True):
    geom = build_geometry(rows, cols, 10.0, 0.1, seed)
    adj = adjacency(rows, cols)
    om = OmegaHistory.default()
    j = couplings(geom)
    obs = [exact_observables(ground_state(j, w, 0.0)[1], adj, w, 0.0, with_x=with_x) for w in om.values]
    return geom, adj, om, obs


@pytest.fixture(scope="module")
def obs_3x3():
    return _observations(3, 3)


def test_case3_shapes(obs_3x3):
    geom, adj, om, obs = obs_3x3
    g = assemble_graph(3, geom, obs, adj, om)
    assert g.node_features.shape == (9, 10)
    assert g.nn_edge_features.shape == (12, 10)
    assert g.nnn_edge_features.shape == (8, 10)
    assert g.nn_targets.shape == (12,) and g.nnn_targets.shape == (8,)


@pytest.mark.parametrize("case", CASES)
def test_feature_table(obs_3x3, case):
    geom, adj, om, obs = obs_3x3
    g = assemble_graph(case, geom, obs, adj, om)
    fn, fe, fnnn = feature_widths(case, len(om))
    assert g.node_features.shape[1] == fn
    assert g.nn_edge_features.shape[1] == fe
    assert g.nnn_edge_features.shape[0] == (8 if case >= 3 else 0)
    if case >= 3:
        assert g.nnn_edge_features.shape[1] == fnnn
    if case == 1:
        assert np.all(g.nn_edge_features == 10.0)
    if case in (2, 3):
        np.testing.assert_array_equal(g.nn_edge_features[:, 0], obs[0].chi_z_nn)
    if case == 5:
        assert np.all(g.node_features == 1.0)
    if case in (4, 5):
        assert np.all(g.nnn_edge_features == 1.0)
    if case == 6:
        assert g.nn_edge_features.shape[1] == 20
        np.testing.assert_array_equal(g.nn_edge_features[:, 3], obs[3].chi_z_nn)
        np.testing.assert_array_equal(g.nn_edge_features[:, 13], obs[3].chi_x_nn)


def test_targets_independent_of_case(obs_3x3):
    geom, adj, om, obs = obs_3x3
    graphs = [assemble_graph(c, geom, obs, adj, om) for c in CASES]
    for g in graphs[1:]:
        np.testing.assert_array_equal(g.nn_targets, graphs[0].nn_targets)
        np.testing.assert_array_equal(g.nnn_targets, graphs[0].nnn_targets)
    assert np.all(np.abs(graphs[0].nn_targets) <= 0.21)


def test_assemble_errors(obs_3x3):
    geom, adj, om, obs = obs_3x3
    with pytest.raises(ContractError):
        assemble_graph(3, geom, obs[:-1], adj, om)
    with pytest.raises(ContractError):
        assemble_graph(3, geom, [], adj)
    with pytest.raises(ContractError):
        assemble_graph(3, geom, obs, adjacency(3, 4), om)
    _, _, _, z_only = _observations(2, 2, with_x=False)
    g22 = build_geometry(2, 2, 10.0, 0.1, 3)
    with pytest.raises(ContractError):
        assemble_graph(6, g22, z_only, adjacency(2, 2))


def test_generation_is_deterministic_and_size_independent():
    a = generate_dataset([(2, 2), (2, 3)], 2, case=3, master_seed=4)
    b = generate_dataset([(2, 3)], 2, case=3, master_seed=4)
    assert len(a) == 4 and len(b) == 2
    for ga, gb in zip(a.by_size()[(2, 3)], b.graphs):
        assert ga.node_features.tobytes() == gb.node_features.tobytes()
        assert ga.nn_targets.tobytes() == gb.nn_targets.tobytes()
    assert a.manifest["counts"] == {"2x2": 2, "2x3": 2}


def test_parallel_generation_matches_serial():
    a = generate_dataset([(2, 2), (2, 3)], 3, case=2, master_seed=9, jobs=1)
    b = generate_dataset([(2, 2), (2, 3)], 3, case=2, master_seed=9, jobs=2)
    for ga, gb in zip(a.graphs, b.graphs):
        assert ga.nn_edge_features.tobytes() == gb.nn_edge_features.tobytes()


def test_exact_versus_snapshot_features():
    ex = generate_dataset([(2, 3)], 2, case=6, master_seed=1)
    sn = generate_dataset([(2, 3)], 2, case=6, mode="snapshot:50000:zx", master_seed=1)
    for ge, gs in zip(ex.graphs, sn.graphs):
        np.testing.assert_array_equal(ge.nn_targets, gs.nn_targets)
        assert np.max(np.abs(ge.nn_edge_features - gs.nn_edge_features)) < 5 / np.sqrt(50000)
        assert gs.provenance == "snapshot(50000)"


def test_case6_snapshot_needs_x():
    with pytest.raises(ConfigurationError):
        generate_dataset([(2, 2)], 1, case=6, mode="snapshot:100")


def test_empty_dataset_roundtrip(tmp_path):
    ds = generate_dataset([(3, 3)], 0, case=3)
    assert len(ds) == 0
    path = ds.save(tmp_path / "empty.jsonl")
    back = DatasetFile.load(path)
    assert len(back) == 0 and back.case == 3
    assert back.manifest["format_version"] == 1


def _assert_same(a, b):
    assert a.manifest == b.manifest
    assert len(a.graphs) == len(b.graphs)
    for ga, gb in zip(a.graphs, b.graphs):
        assert (ga.rows, ga.cols, ga.case, ga.provenance, ga.geometry_seed) == (gb.rows, gb.cols, gb.case, gb.provenance, gb.geometry_seed)
        for name, arr in ga.tensors().items():
            other = gb.tensors()[name]
            assert arr.shape == other.shape and arr.tobytes() == other.tobytes(), name


@pytest.mark.parametrize("fmt", ["binary", "jsonl-full"])
def test_roundtrip_bit_identical(tmp_path, small_case3, fmt):
    path = small_case3.save(tmp_path / f"ds_{fmt}.jsonl", fmt=fmt)
    _assert_same(small_case3, DatasetFile.load(path))
    lines = path.read_text().splitlines()
    manifest = json.loads(lines[0])
    assert {"format_version", "case", "omega_values", "sizes", "counts", "mode", "master_seed"} <= set(manifest)
    assert len(lines) == 1 + len(small_case3)
    assert path.with_suffix(".bin").exists() == (fmt == "binary")


def test_roundtrip_case6(tmp_path, small_case6):
    _assert_same(small_case6, DatasetFile.load(small_case6.save(tmp_path / "c6.jsonl")))


def test_split(small_case3):
    tr, te = split_dataset(small_case3, 0.25, seed=3)
    tr2, te2 = split_dataset(small_case3, 0.25, seed=3)
    assert [g.geometry_seed for g in te.graphs] == [g.geometry_seed for g in te2.graphs]
    assert {g.geometry_seed for g in tr.graphs}.isdisjoint({g.geometry_seed for g in te.graphs})
    assert te.manifest["counts"] == {"2x2": 1, "2x3": 1, "3x3": 1}
    assert len(tr) + len(te) == len(small_case3)


def test_split_counts_at_scale():
    # 2000 graphs and fraction 0.1 give 1800/200; checked on the index arithmetic with light graphs
    ds = generate_dataset([(1, 2)], 2000, case=2, master_seed=0)
    tr, te = split_dataset(ds, 0.1, seed=0)
    assert (len(tr), len(te)) == (1800, 200)


def test_split_cannot_stratify(small_case3):
    one = small_case3.subset(small_case3.graphs[:1])
    with pytest.raises(ConfigurationError):
        split_dataset(one, 0.5)
    with pytest.raises(ConfigurationError):
        split_dataset(small_case3, 1.0)


@pytest.mark.parametrize("case", [1, 2, 4, 5])
def test_recast_equals_direct_generation(small_case3, case):
    direct = generate_dataset([(2, 2), (2, 3), (3, 3)], 4, case=case, master_seed=5)
    recast = recast_case(small_case3, case)
    for gd, gr in zip(direct.graphs, recast.graphs):
        for name, arr in gd.tensors().items():
            assert arr.tobytes() == gr.tensors()[name].tobytes(), name
    assert recast.case == case


def test_recast_rejects(small_case3, small_case6):
    with pytest.raises(ContractError):
        recast_case(small_case3, 6)
    with pytest.raises(ContractError):
        recast_case(small_case6, 2)


def test_per_omega_graphs(small_case6):
    ex = expand_per_omega(small_case6)
    assert len(ex) == 10 * len(small_case6)
    g = ex.graphs[0]
    assert g.node_features.shape[1] == 1 and g.nn_edge_features.shape[1] == 2
    np.testing.assert_array_equal(g.nn_edge_features[:, 1], small_case6.graphs[0].nn_edge_features[:, 10])


def test_data_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("HAMLEARN_DATA_DIR", str(tmp_path))
    assert data_dir() == tmp_path
