"""Training runs, evaluation metrics and replicate statistics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._rng import derive_seed
from .dataset import DatasetFile, GraphSample, parse_case, split_dataset
from .estimator import TARGET_MODES, EdgeDistanceRegressor, stack_targets
from .exceptions import ConfigurationError, ContractError, TrainingDivergedError, UndefinedMetricError
from .neural.autodiff import Tensor
from .neural.optim import EPOCHS_DEFAULT, LR_END, LR_START

logger = logging.getLogger(__name__)

UM_TO_NM = 1000.0
METRICS = ("r2", "mae_nm", "medae_nm")


# -- loss and metrics -------------------------------------------------------


def loss_mse(predictions, targets):
    """Squared L2 norm of ``predictions - targets`` (a sum, not a mean).

    Tensors in, Tensor out, so it can sit at the end of a differentiable graph.
    """
    if isinstance(predictions, Tensor):
        t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
        if predictions.shape != t.shape:
            raise ContractError(f"prediction shape {predictions.shape} != target shape {t.shape}")
        return (predictions - Tensor(t)).square().sum()
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != target shape {t.shape}")
    d = p - t
    return float(d @ d) if d.ndim == 1 else float((d * d).sum())


def metric_r2(targets, predictions) -> float:
    y = np.asarray(targets, dtype=np.float64)
    yhat = np.asarray(predictions, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ContractError(f"target shape {y.shape} != prediction shape {yhat.shape}")
    if y.size < 2:
        raise UndefinedMetricError("R^2 needs at least two targets")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


def _abs_err_nm(targets, predictions) -> np.ndarray:
    y = np.asarray(targets, dtype=np.float64)
    yhat = np.asarray(predictions, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ContractError(f"target shape {y.shape} != prediction shape {yhat.shape}")
    if y.size == 0:
        raise ContractError("metrics need at least one target")
    return np.abs(yhat - y) * UM_TO_NM


def metric_mae(targets, predictions) -> float:
    """Mean absolute error; inputs in um, result in nm."""
    return float(_abs_err_nm(targets, predictions).mean())


def metric_medae(targets, predictions) -> float:
    """Median absolute error; inputs in um, result in nm."""
    return float(np.median(_abs_err_nm(targets, predictions)))


def all_metrics(targets, predictions) -> Dict[str, float]:
    try:
        r2 = metric_r2(targets, predictions)
    except UndefinedMetricError:
        r2 = float("nan")
    return {
        "r2": r2,
        "mae_nm": metric_mae(targets, predictions),
        "medae_nm": metric_medae(targets, predictions),
    }


# -- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    case: int = 3
    epochs: int = EPOCHS_DEFAULT
    batch_size: int = 32
    seed: int = 0
    lr_start: float = LR_START
    lr_end: float = LR_END
    target_mode: str = "nn"
    model: str = "gnn"  # "gnn" | "mlp-baseline"
    validation_fraction: float = 0.1
    weight_decay: float = 1e-2
    n_layers: int = 4
    embed_dim: int = 32
    hidden: int = 64
    task_hidden: int = 64
    aggregators: Tuple[str, ...] = ("mean", "min", "max", "sum")
    residual: bool = True
    train_path: Optional[str] = None
    test_paths: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.case = parse_case(self.case)
        if int(self.epochs) < 1:
            raise ConfigurationError("epochs must be >= 1")
        if int(self.batch_size) < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.target_mode not in TARGET_MODES:
            raise ConfigurationError(f"target mode must be one of {TARGET_MODES}")
        if self.target_mode == "nn+nnn" and self.case < 3:
            raise ConfigurationError("NN+NNN targets need NNN edge features (case 3..6)")
        if self.model not in ("gnn", "mlp-baseline"):
            raise ConfigurationError(f"model must be 'gnn' or 'mlp-baseline', got {self.model!r}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigurationError("validation fraction must lie in [0, 1)")
        self.aggregators = tuple(self.aggregators)

    def to_json(self) -> dict:
        d = asdict(self)
        d["aggregators"] = list(self.aggregators)
        return d

    def estimator(self, seed: Optional[int] = None) -> EdgeDistanceRegressor:
        return EdgeDistanceRegressor(
            kind="mlp" if self.model == "mlp-baseline" else "gnn",
            n_layers=self.n_layers,
            embed_dim=self.embed_dim,
            hidden=self.hidden,
            task_hidden=self.task_hidden,
            aggregators=self.aggregators,
            residual=self.residual,
            target_mode=self.target_mode,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            weight_decay=self.weight_decay,
            random_state=self.seed if seed is None else seed,
        )


@dataclass
class TrainResult:
    model: EdgeDistanceRegressor
    curves: List[dict]
    config: TrainConfig

    def curves_csv(self) -> str:
        return curves_to_csv(self.curves)


def _check_case(config: TrainConfig, ds: DatasetFile, what: str):
    if ds.case != config.case:
        raise ContractError(f"{what} holds case {ds.case} but the configuration asks for case {config.case}")


def train(config: TrainConfig, train_ds: DatasetFile, val_ds: Optional[DatasetFile] = None, seed: Optional[int] = None) -> TrainResult:
    """Fit one model. Without ``val_ds`` a ``validation_fraction`` slice of
    ``train_ds`` (stratified per size) is held out for the validation curve."""
    _check_case(config, train_ds, "training dataset")
    seed = config.seed if seed is None else seed
    if val_ds is None and config.validation_fraction > 0:
        train_ds, val_ds = split_dataset(train_ds, config.validation_fraction, derive_seed(seed, "validation"))
    if val_ds is not None:
        _check_case(config, val_ds, "validation dataset")
    est = config.estimator(seed)
    est.fit(train_ds.graphs, eval_set=val_ds.graphs if val_ds is not None else None)
    return TrainResult(model=est, curves=est.history_, config=config)


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Means over consecutive non-overlapping blocks of ``window`` epochs."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size // window
    return v[: n * window].reshape(n, window).mean(axis=1)


def curves_to_csv(curves: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["epoch", "train_loss_um2", "val_loss_um2", "lr"])
    for row in curves:
        w.writerow([row["epoch"], _fmt(row["train_loss"]), _fmt(row["val_loss"]), _fmt(row["lr"])])
    return buf.getvalue()


def _fmt(x) -> str:
    return f"{float(x):.17g}"


# -- evaluation -----------------------------------------------------------------


def evaluate(model: EdgeDistanceRegressor, graphs: Sequence[GraphSample]) -> Dict[str, float]:
    y = model.targets(graphs)
    return all_metrics(y, model.predict(graphs))


def prediction_errors(model: EdgeDistanceRegressor, graphs: Sequence[GraphSample]) -> np.ndarray:
    """Prediction minus target for every target edge, in um."""
    return model.predict(graphs) - model.targets(graphs)


@dataclass
class MetricsReport:
    """Per cluster size, per metric: one value per replicate, with mean and
    standard error (sample std / sqrt(replicates))."""

    values: Dict[str, Dict[str, List[float]]]
    training_sizes: List[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)

    @property
    def sizes(self) -> List[str]:
        return sorted(self.values, key=_size_key)

    @property
    def n_replicates(self) -> int:
        for per_metric in self.values.values():
            for vals in per_metric.values():
                return len(vals)
        return 0

    def mean(self, size: str, metric: str) -> float:
        v = np.asarray(self.values[size][metric], dtype=np.float64)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else float("nan")

    def stderr(self, size: str, metric: str) -> float:
        v = np.asarray(self.values[size][metric], dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size < 2:
            return float("nan")
        return float(v.std(ddof=1) / math.sqrt(v.size))

    def is_extrapolation(self, size: str) -> bool:
        return size not in self.training_sizes

    def to_json(self) -> dict:
        return {
            "training_sizes": self.training_sizes,
            "config": self.config,
            "failures": self.failures,
            "sizes": {
                s: {
                    "extrapolation": self.is_extrapolation(s),
                    **{
                        m: {"mean": self.mean(s, m), "stderr": self.stderr(s, m), "replicates": list(v)}
                        for m, v in self.values[s].items()
                    },
                }
                for s in self.sizes
            },
        }

    def to_csv(self) -> str:
        k = self.n_replicates
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["size", "extrapolation", "metric", "unit", "mean", "stderr"] + [f"replicate_{i}" for i in range(k)])
        for s in self.sizes:
            for m in METRICS:
                if m not in self.values[s]:
                    continue
                unit = "nm" if m.endswith("_nm") else "1"
                vals = self.values[s][m]
                w.writerow([s, int(self.is_extrapolation(s)), m, unit, _fmt(self.mean(s, m)), _fmt(self.stderr(s, m))] + [_fmt(v) for v in vals])
        return buf.getvalue()

    def write(self, stem) -> Tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True, allow_nan=True))
        return csv_path, json_path


def _size_key(s: str):
    r, c = s.split("x")
    return (int(r) * int(c), int(r), int(c))


def _size_label(size) -> str:
    return f"{size[0]}x{size[1]}"


def evaluate_extrapolation(
    checkpoints: Sequence[EdgeDistanceRegressor],
    test_datasets: Dict[str, Sequence[GraphSample]],
    training_sizes: Sequence[str] = (),
    config: Optional[dict] = None,
) -> MetricsReport:
    """Metrics of every checkpoint on every test size; sizes outside
    ``training_sizes`` are flagged as extrapolation."""
    if isinstance(checkpoints, EdgeDistanceRegressor):
        checkpoints = [checkpoints]
    values: Dict[str, Dict[str, List[float]]] = {}
    for size, graphs in test_datasets.items():
        graphs = list(graphs)
        if not graphs:
            continue
        values[size] = {m: [] for m in METRICS}
        for model in checkpoints:
            fn = graphs[0].node_features.shape[1]
            fe = graphs[0].nn_edge_features.shape[1]
            if (fn, fe) != (model.config_.node_in, model.config_.edge_in):
                raise ContractError(
                    f"size {size}: features ({fn}, {fe}) do not match checkpoint ({model.config_.node_in}, {model.config_.edge_in})"
                )
            for m, v in evaluate(model, graphs).items():
                values[size][m].append(v)
    return MetricsReport(values=values, training_sizes=list(training_sizes), config=dict(config or {}))


def group_by_size(ds) -> Dict[str, List[GraphSample]]:
    graphs = ds.graphs if hasattr(ds, "graphs") else ds
    out: Dict[str, List[GraphSample]] = {}
    for g in graphs:
        out.setdefault(_size_label(g.size), []).append(g)
    return out


def _replicate(args):
    config, train_ds, val_ds, seed = args
    try:
        return train(config, train_ds, val_ds, seed=seed), None
    except TrainingDivergedError as exc:  # recorded, not raised: the other replicates still count
        return None, {"seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def replicate_seeds(seed: int, k: int) -> List[int]:
    return [derive_seed(seed, "replicate", r) for r in range(k)]


def train_replicates(
    config: TrainConfig,
    seeds: Sequence[int],
    train_ds: DatasetFile,
    val_ds: Optional[DatasetFile] = None,
    jobs: int = 1,
) -> Tuple[List[TrainResult], List[dict]]:
    """One training per seed. A diverged replicate is recorded in the failure
    list instead of aborting the others."""
    tasks = [(config, train_ds, val_ds, s) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_replicate, tasks))
    else:
        outcomes = [_replicate(t) for t in tasks]
    return [r for r, _ in outcomes if r is not None], [f for _, f in outcomes if f is not None]


def run_replicates(
    config: TrainConfig,
    k: int,
    train_ds: DatasetFile,
    test_datasets: Dict[str, Sequence[GraphSample]],
    val_ds: Optional[DatasetFile] = None,
    jobs: int = 1,
    seeds: Optional[Sequence[int]] = None,
) -> Tuple[MetricsReport, List[TrainResult]]:
    """``k`` independent trainings (seeds derived from ``config.seed``), each
    evaluated on every test size."""
    if k < 2:
        raise ConfigurationError(f"need at least 2 replicates, got {k}")
    seeds = list(seeds) if seeds is not None else replicate_seeds(config.seed, k)
    if len(seeds) != k:
        raise ConfigurationError("one seed per replicate required")
    results, failures = train_replicates(config, seeds, train_ds, val_ds, jobs)
    training_sizes = sorted({_size_label(g.size) for g in train_ds.graphs}, key=_size_key)
    if results:
        report = evaluate_extrapolation([r.model for r in results], test_datasets, training_sizes, config.to_json())
    else:
        report = MetricsReport(values={}, training_sizes=training_sizes, config=config.to_json())
    report.failures = failures
    return report, results
