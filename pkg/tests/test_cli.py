import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from hamlearn.bijection import correlation_matrix, random_couplings
from hamlearn.cli import main
from hamlearn.dataset import DatasetFile

GEN = ["gen", "--sizes", "2x2,2x3", "--count", "2", "--omegas=-10,0,10", "--seed", "3"]
TRAIN_SMALL = ["--epochs", "2", "--batch-size", "2", "--validation-fraction", "0.5"]


@pytest.fixture(autouse=True)
def data_root(tmp_path, monkeypatch):
    monkeypatch.setenv("HAMLEARN_DATA_DIR", str(tmp_path / "data"))
    return tmp_path / "data"


def _run(*argv):
    return main([str(a) for a in argv])


def test_gen_writes_dataset_and_log(tmp_path):
    out = tmp_path / "d.jsonl"
    assert _run(*GEN, "--case", "3", "--out", out) == 0
    ds = DatasetFile.load(out)
    assert ds.case == 3 and len(ds) == 4
    assert ds.manifest["run_config"]["count"] == 2
    assert (tmp_path / "d.jsonl.log").exists()


def test_gen_is_byte_identical_on_rerun(tmp_path):
    a, b = tmp_path / "a" / "d.jsonl", tmp_path / "b" / "d.jsonl"
    assert _run(*GEN, "--out", a) == 0
    assert _run(*GEN, "--out", b) == 0
    files_a = sorted(p.name for p in a.parent.iterdir() if not p.name.endswith(".log"))
    assert files_a == sorted(p.name for p in b.parent.iterdir() if not p.name.endswith(".log"))
    for name in files_a:
        ta, tb = (a.parent / name).read_bytes(), (b.parent / name).read_bytes()
        # the resolved config records the output path, which differs here
        assert ta.replace(str(a).encode(), b"") == tb.replace(str(b).encode(), b"")


def test_gen_snapshot_case6(tmp_path):
    out = tmp_path / "s.jsonl"
    assert _run(*GEN, "--case", "6", "--mode", "snapshot:200:zx", "--out", out) == 0
    ds = DatasetFile.load(out)
    assert ds.case == 6 and ds.graphs[0].provenance.startswith("snapshot")


def test_gen_unknown_case_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        _run(*GEN, "--case", "9")
    assert info.value.code == 2


def test_gen_bad_values_exit_2(tmp_path, capsys):
    assert _run(*GEN, "--count", "0", "--out", tmp_path / "x") == 2
    assert _run(*GEN, "--mode", "telepathy", "--out", tmp_path / "x") == 2
    assert "error" in capsys.readouterr().err


def test_default_output_under_data_dir(data_root):
    assert _run(*GEN) == 0
    assert any(p.suffix == ".jsonl" for p in data_root.iterdir())


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 1, "sizes": "2x2", "seed": 9}))
    out = tmp_path / "d.jsonl"
    assert _run("gen", "--config", cfg, "--count", "3", "--omegas", "5", "--out", out) == 0
    rc = DatasetFile.load(out).manifest["run_config"]
    assert rc["count"] == 3 and rc["sizes"] == "2x2" and rc["seed"] == 9 and rc["case"] == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "blue"}))
    assert _run("gen", "--config", bad, "--out", out) == 2


@pytest.fixture
def datasets(tmp_path):
    tr, te = tmp_path / "train.jsonl", tmp_path / "test.jsonl"
    assert _run(*GEN, "--case", "3", "--out", tr) == 0
    assert _run("gen", "--sizes", "2x2,3x3", "--count", "1", "--omegas=-10,0,10", "--seed", "4", "--out", te) == 0
    return tr, te


def test_train_and_eval(datasets, tmp_path, capsys):
    tr, te = datasets
    out = tmp_path / "run"
    assert _run("train", "--data", tr, "--test", te, "--replicates", "2", *TRAIN_SMALL, "--out", out) == 0
    for r in range(2):
        assert (out / f"replicate_{r}" / "checkpoint" / "manifest.json").exists()
        curves = (out / f"replicate_{r}" / "loss_curves.csv").read_bytes()
        assert curves.startswith(b"epoch,train_loss_um2,val_loss_um2,lr\r\n")
        assert curves.endswith(b",0.00025000000000000001\r\n")
    rows = list(csv.DictReader(io.StringIO((out / "metrics.csv").read_text())))
    assert {r["size"] for r in rows} == {"2x2", "3x3"}
    assert {r["extrapolation"] for r in rows if r["size"] == "3x3"} == {"1"}
    capsys.readouterr()

    ev = tmp_path / "ev"
    assert _run("eval", "--checkpoint", out, "--data", te, "--sizes", "3x3", "--out", ev) == 0
    rows = list(csv.DictReader(io.StringIO(ev.with_suffix(".csv").read_text())))
    assert {r["size"] for r in rows} == {"3x3"} and rows[0]["replicate_1"]
    assert _run("eval", "--checkpoint", out / "replicate_0" / "checkpoint", "--data", te, "--sizes", "5x5") == 2


def test_train_mlp_baseline(datasets, tmp_path):
    tr, _ = datasets
    out = tmp_path / "mlp"
    assert _run("train", "--data", tr, "--model", "mlp-baseline", *TRAIN_SMALL, "--out", out) == 0
    m = json.loads((out / "replicate_0" / "checkpoint" / "manifest.json").read_text())
    assert m["model_config"]["kind"] == "mlp"


def test_train_is_byte_identical_on_rerun(datasets, tmp_path):
    tr, _ = datasets
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run("train", "--data", tr, *TRAIN_SMALL, "--out", out) == 0
    for name in ["checkpoint/tensors", "loss_curves.csv"]:
        pa, pb = a / "replicate_0" / name, b / "replicate_0" / name
        if pa.is_dir():
            for f in pa.iterdir():
                assert f.read_bytes() == (pb / f.name).read_bytes()
        else:
            assert pa.read_bytes() == pb.read_bytes()


def test_case_mismatch_is_reported(datasets, tmp_path, capsys):
    tr, _ = datasets
    assert _run("train", "--data", tr, "--case", "2", *TRAIN_SMALL, "--out", tmp_path / "r") == 1
    assert "case" in capsys.readouterr().err
    out = tmp_path / "ok"
    assert _run("train", "--data", tr, *TRAIN_SMALL, "--out", out) == 0
    other = tmp_path / "c2.jsonl"
    assert _run(*GEN, "--case", "2", "--out", other) == 0
    capsys.readouterr()
    assert _run("eval", "--checkpoint", out, "--data", other) == 1
    assert "case" in capsys.readouterr().err


def test_sample(tmp_path):
    out = tmp_path / "snap"
    assert _run("sample", "--size", "2x2", "--n-samples", "50", "--basis", "zx", "--out", out) == 0
    assert {p.name for p in out.iterdir()} == {"geometry.json", "config.json", "snapshots_Z.hlss", "snapshots_X.hlss"}
    assert _run("sample", "--basis", "y", "--out", out) == 2


def test_phase_diagram_csv(tmp_path, capsys):
    out = tmp_path / "pd.csv"
    assert _run("phase-diagram", "--size", "2x2", "--omegas", "0:20:5", "--spacings", "9,10", "--out", out) == 0
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0] == ["omega_rad_per_us", "spacing_um", "order_parameter"]
    assert len(rows) == 1 + 5 * 2
    by_a = {}
    for om, a, op in rows[1:]:
        by_a.setdefault(float(a), []).append((float(om), float(op)))
    for vals in by_a.values():
        ops = [op for _, op in sorted(vals)]
        assert ops[0] == pytest.approx(1.0) and all(x > y for x, y in zip(ops, ops[1:]))
    assert "crosses 0.5" in capsys.readouterr().out
    assert out.with_suffix(".config.json").exists()


def test_verify_bijection_exit_codes(tmp_path, capsys):
    out = tmp_path / "b.json"
    assert _run("verify-bijection", "--n", "3", "--trials", "20", "--omega", "1", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["n_violations"] == 0 and rep["run_config"]["trials"] == 20
    assert _run("verify-bijection", "--omega", "0", "--out", out) == 2
    assert "nonzero transverse field" in capsys.readouterr().err
    # an impossible floor turns every pair into a violation
    assert _run("verify-bijection", "--n", "3", "--trials", "3", "--c-floor", "10", "--out", out) == 1


def test_invert_roundtrip(tmp_path):
    j = random_couplings(np.random.default_rng(0), 3, "chain")
    target = tmp_path / "c.json"
    target.write_text(json.dumps({"c": correlation_matrix(j, 10.0).tolist()}))
    init = tmp_path / "j0.json"
    init.write_text(json.dumps({"j_rad_per_us": (0.5 * j.j_rad_per_us).tolist()}))
    out = tmp_path / "j.json"
    assert _run("invert", "--target", target, "--omega", "10", "--init", init, "--out", out) == 0
    rec = np.array(json.loads(out.read_text())["j_rad_per_us"])
    np.testing.assert_allclose(rec, j.j_rad_per_us, rtol=1e-6, atol=1e-9)
    assert _run("invert", "--target", target, "--omega", "0", "--out", out) == 2
    assert _run("invert", "--omega", "1", "--out", out) == 2


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "hamlearn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ["gen", "train", "eval", "sample", "phase-diagram", "verify-bijection", "invert"]:
        assert cmd in res.stdout


def test_unsplittable_validation_is_usage_error(datasets, tmp_path):
    tr, _ = datasets
    assert _run("train", "--data", tr, "--epochs", "1", "--validation-fraction", "0.1", "--out", tmp_path / "r") == 2
