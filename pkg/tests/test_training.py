import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn import metrics as skm

from hamlearn.dataset import GraphSample, generate_dataset, recast_case, split_dataset
from hamlearn.exceptions import ConfigurationError, ContractError, UndefinedMetricError
from hamlearn.neural import Tensor
from hamlearn.training import (
    MetricsReport,
    TrainConfig,
    all_metrics,
    curves_to_csv,
    evaluate,
    evaluate_extrapolation,
    group_by_size,
    loss_mse,
    metric_mae,
    metric_medae,
    metric_r2,
    replicate_seeds,
    run_replicates,
    smoothed,
    train,
)

SMALL = dict(n_layers=2, embed_dim=8, hidden=16, task_hidden=16, batch_size=4)
finite = st.floats(-10, 10, allow_nan=False)


# -- loss ----------------------------------------------------------------------


def test_loss_examples():
    assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert loss_mse([0.1], [0.0]) == pytest.approx(0.01)
    with pytest.raises(ContractError):
        loss_mse([1.0, 2.0], [1.0])
    with pytest.raises(ContractError):
        loss_mse(Tensor(np.zeros(2)), np.zeros(3))


def test_loss_gradient_is_twice_residual():
    rng = np.random.default_rng(0)
    y, yhat = rng.normal(size=5), rng.normal(size=5)
    t = Tensor(yhat.copy(), requires_grad=True)
    loss = loss_mse(t, y)
    loss.backward()
    np.testing.assert_allclose(t.grad, 2 * (yhat - y), rtol=1e-14)
    h = 1e-6
    fd = [(loss_mse(yhat + h * e, y) - loss_mse(yhat - h * e, y)) / (2 * h) for e in np.eye(5)]
    np.testing.assert_allclose(t.grad, fd, rtol=1e-7)
    assert float(loss.data) == pytest.approx(loss_mse(yhat, y), rel=1e-15)


# -- metrics ---------------------------------------------------------------------


def test_metric_examples():
    assert metric_r2([1, 2, 3], [1, 2, 3]) == 1.0
    assert metric_r2([1, 2, 3], [2, 2, 2]) == 0.0
    assert metric_r2([1, 2, 3], [1, 2, 4]) == pytest.approx(0.5)
    assert metric_mae([0, 0], [0.01, 0.01]) == pytest.approx(10.0)
    assert metric_medae([0, 0], [0.01, 0.01]) == pytest.approx(10.0)
    assert metric_mae([0, 0, 0, 0], [0, 0, 0, 0.1]) == pytest.approx(25.0)
    assert metric_medae([0, 0, 0, 0], [0, 0, 0, 0.1]) == 0.0
    assert metric_mae([1, 2], [1, 2]) == 0.0 and metric_medae([1, 2], [1, 2]) == 0.0


def test_metric_errors():
    with pytest.raises(UndefinedMetricError):
        metric_r2([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedMetricError):
        metric_r2([1.0], [1.0])
    with pytest.raises(ContractError):
        metric_mae([], [])
    with pytest.raises(ContractError):
        metric_r2([1, 2], [1, 2, 3])
    assert np.isnan(all_metrics([1.0, 1.0], [1.0, 2.0])["r2"])


@given(arrays(np.float64, st.integers(2, 30), elements=finite), st.data())
def test_metrics_match_sklearn(y, data):
    yhat = data.draw(arrays(np.float64, y.shape, elements=finite))
    assert metric_mae(y, yhat) == pytest.approx(1000 * skm.mean_absolute_error(y, yhat), rel=1e-12, abs=1e-12)
    assert metric_medae(y, yhat) == pytest.approx(1000 * skm.median_absolute_error(y, yhat), rel=1e-12, abs=1e-12)
    assert metric_mae(y, yhat) >= 0 and metric_medae(y, yhat) >= 0
    if np.var(y) > 1e-12:
        r2 = metric_r2(y, yhat)
        assert r2 == pytest.approx(skm.r2_score(y, yhat), rel=1e-9, abs=1e-9)
        assert r2 <= 1.0


# -- config ------------------------------------------------------------------------


def test_config_validation():
    for bad in [dict(epochs=0), dict(batch_size=0), dict(target_mode="x"), dict(model="cnn"),
                dict(case=2, target_mode="nn+nnn"), dict(validation_fraction=1.0)]:
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    cfg = TrainConfig(case="#3", model="mlp-baseline")
    assert cfg.case == 3 and cfg.estimator().kind == "mlp"
    assert json.loads(json.dumps(cfg.to_json()))["aggregators"] == ["mean", "min", "max", "sum"]


def test_train_rejects_case_mismatch(small_case3):
    with pytest.raises(ContractError):
        train(TrainConfig(case=2, epochs=1, **SMALL), small_case3)


# -- learning behaviour ------------------------------------------------------------


def _synthetic(n, target, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append(GraphSample(3, 3, 3, rng.normal(size=(9, 2)), rng.normal(size=(12, 2)), rng.normal(size=(8, 2)),
                               np.full(12, target), np.full(8, target)))
    return out


@pytest.mark.parametrize("target", [0.05, 0.0])
def test_constant_target_is_learned(target):
    from hamlearn.estimator import EdgeDistanceRegressor

    train_g, val_g = _synthetic(24, target, 1), _synthetic(8, target, 2)
    est = EdgeDistanceRegressor(epochs=50, random_state=0, **SMALL).fit(train_g, eval_set=val_g)
    pred = est.predict(val_g)
    assert metric_mae(est.targets(val_g), pred) < 1.0
    assert np.abs(pred - target).max() < 2e-3


def test_train_holds_out_validation(small_case3):
    res = train(TrainConfig(case=3, epochs=3, validation_fraction=0.25, **SMALL), small_case3)
    assert len(res.curves) == 3
    assert all(np.isfinite(r["val_loss"]) for r in res.curves)
    assert [r["lr"] for r in res.curves][0] == 5e-3
    res2 = train(TrainConfig(case=3, epochs=3, validation_fraction=0.0, **SMALL), small_case3)
    assert all(np.isnan(r["val_loss"]) for r in res2.curves)


def test_smoothed_blocks():
    v = np.arange(45.0)
    np.testing.assert_array_equal(smoothed(v, 20), [9.5, 29.5])
    assert smoothed(v[:5], 20).size == 0


def test_curves_csv_format():
    text = curves_to_csv([{"epoch": 0, "train_loss": 0.1, "val_loss": float("nan"), "lr": 5e-3}])
    assert text.startswith("epoch,train_loss_um2,val_loss_um2,lr\r\n")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[1] == ["0", "0.10000000000000001", "nan", "0.0050000000000000001"]


# -- reports and replicates -----------------------------------------------------------


def test_metrics_report_statistics_and_files(tmp_path):
    rep = MetricsReport(
        values={"3x3": {"r2": [0.9, 0.95, 1.0], "mae_nm": [3.0, 4.0, 5.0], "medae_nm": [1.0, 1.0, 1.0]},
                "4x5": {"r2": [0.8, 0.7, 0.75], "mae_nm": [6.0, 7.0, 8.0], "medae_nm": [2.0, 2.0, 2.0]}},
        training_sizes=["3x3"],
    )
    assert rep.n_replicates == 3
    assert rep.mean("3x3", "mae_nm") == pytest.approx(4.0)
    assert rep.stderr("3x3", "mae_nm") == pytest.approx(1.0 / np.sqrt(3))
    assert rep.stderr("3x3", "medae_nm") == 0.0
    assert not rep.is_extrapolation("3x3") and rep.is_extrapolation("4x5")
    csv_path, json_path = rep.write(tmp_path / "m")
    rows = list(csv.DictReader(io.StringIO(csv_path.read_text())))
    assert len(rows) == 6
    assert {r["extrapolation"] for r in rows if r["size"] == "4x5"} == {"1"}
    assert [r["unit"] for r in rows[:3]] == ["1", "nm", "nm"]
    data = json.loads(json_path.read_text())
    assert data["sizes"]["4x5"]["extrapolation"] is True
    assert data["sizes"]["3x3"]["r2"]["replicates"] == [0.9, 0.95, 1.0]


def test_stderr_needs_two_values():
    rep = MetricsReport(values={"2x2": {"r2": [0.5]}})
    assert np.isnan(rep.stderr("2x2", "r2"))


def test_replicate_seeds_distinct_and_stable():
    s = replicate_seeds(0, 4)
    assert len(set(s)) == 4 and s == replicate_seeds(0, 4) and s != replicate_seeds(1, 4)


def test_run_replicates_and_extrapolation(small_case3):
    train_part = small_case3.subset([g for g in small_case3.graphs if g.size != (3, 3)])
    test = group_by_size(small_case3)
    with pytest.raises(ConfigurationError):
        run_replicates(TrainConfig(case=3, epochs=1, **SMALL), 1, train_part, test)
    report, results = run_replicates(TrainConfig(case=3, epochs=2, validation_fraction=0, **SMALL), 2, train_part, test)
    assert len(results) == 2 and report.failures == []
    assert report.training_sizes == ["2x2", "2x3"]
    assert report.is_extrapolation("3x3")
    assert report.n_replicates == 2
    one = evaluate(results[0].model, test["3x3"])
    assert report.values["3x3"]["mae_nm"][0] == one["mae_nm"]


def test_extrapolation_rejects_feature_mismatch(small_case3, small_case6):
    res = train(TrainConfig(case=3, epochs=1, validation_fraction=0, **SMALL), small_case3)
    with pytest.raises(ContractError):
        evaluate_extrapolation([res.model], group_by_size(small_case6))


def test_size_invariance_runs_on_larger_graphs(small_case3):
    res = train(TrainConfig(case=3, epochs=1, validation_fraction=0, **SMALL), small_case3.subset([g for g in small_case3.graphs if g.size == (2, 2)]))
    big = generate_dataset([(4, 4)], 1, case=3, master_seed=2)
    assert np.all(np.isfinite(res.model.predict(big.graphs)))


def test_failed_replicate_recorded_not_raised(small_case3):
    import copy

    ds = small_case3.subset([copy.deepcopy(g) for g in small_case3.graphs])
    for g in ds.graphs:
        g.nn_targets = np.full_like(g.nn_targets, np.nan)
    report, results = run_replicates(TrainConfig(case=3, epochs=1, validation_fraction=0, **SMALL), 2, ds, group_by_size(small_case3))
    assert results == [] and len(report.failures) == 2
    assert "TrainingDivergedError" in report.failures[0]["error"]
