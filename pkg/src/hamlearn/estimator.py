"""Scikit-learn style regressor from correlator graphs to per-bond displacements.

``X`` is a sequence of :class:`~hamlearn.dataset.GraphSample`; the targets live
inside the samples, so ``y`` is accepted for API compatibility and ignored.
``predict`` returns one displacement (um) per target edge, concatenated in graph
order: every graph's NN edges, then its NNN edges when ``target_mode="nn+nnn"``.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from ._rng import derive_seed, substream
from .exceptions import ContractError, TrainingDivergedError
from .neural.autodiff import Tensor
from .neural.model import (
    AGGREGATORS,
    GraphBatch,
    ModelConfig,
    Standardizer,
    as_tensors,
    degree_histogram,
    forward,
    init_params,
)
from .neural.optim import EPOCHS_DEFAULT, LR_END, LR_START, AdamWState, adamw_step, lr_schedule

logger = logging.getLogger(__name__)

TARGET_MODES = ("nn", "nn+nnn")
CHECKPOINT_VERSION = 1


def check_graphs(graphs, name: str = "X") -> List:
    """Validate a non-empty sequence of graph samples with uniform feature widths."""
    if graphs is None:
        raise ContractError(f"{name} must be a sequence of GraphSample, got None")
    graphs = list(graphs.graphs if hasattr(graphs, "graphs") else graphs)
    if not graphs:
        raise ContractError(f"{name} is empty")
    fn = graphs[0].node_features.shape[1]
    fe = graphs[0].nn_edge_features.shape[1]
    for g in graphs:
        if g.node_features.shape != (g.n_nodes, fn) or g.nn_edge_features.shape[1] != fe:
            raise ContractError(f"{name}: feature widths differ between graphs")
        if g.nn_targets.shape != (g.nn_edge_features.shape[0],):
            raise ContractError(f"{name}: NN targets do not match NN edges")
        if not (np.all(np.isfinite(g.node_features)) and np.all(np.isfinite(g.nn_edge_features))):
            raise ContractError(f"{name}: non-finite features")
    return graphs


def stack_targets(graphs: Sequence, target_mode: str = "nn") -> np.ndarray:
    ys = []
    for g in graphs:
        ys.append(g.nn_targets)
        if target_mode == "nn+nnn":
            ys.append(g.nnn_targets)
    return np.concatenate(ys) if ys else np.zeros(0)


class EdgeDistanceRegressor(RegressorMixin, BaseEstimator):
    """Graph network (or task-network-only baseline) trained with AdamW on the
    summed squared displacement error.

    Parameters
    ----------
    kind : {"gnn", "mlp"}
        ``"mlp"`` drops message passing; the task network then sees only the
        edge's own features.
    target_mode : {"nn", "nn+nnn"}
        With ``"nn+nnn"`` the same task network also predicts NNN displacements.
    epochs, batch_size : int
        Batches are sets of whole graphs.
    lr_start, lr_end : float
        Endpoints of the linear learning-rate ramp.
    random_state : int
        Seeds parameter initialisation and batch shuffling.
    """

    def __init__(
        self,
        kind: str = "gnn",
        n_layers: int = 4,
        embed_dim: int = 32,
        edge_embed_dim: int = 32,
        hidden: int = 64,
        task_hidden: int = 64,
        aggregators=AGGREGATORS,
        residual: bool = True,
        use_nnn_edges: bool = True,
        target_mode: str = "nn",
        epochs: int = EPOCHS_DEFAULT,
        batch_size: int = 32,
        lr_start: float = LR_START,
        lr_end: float = LR_END,
        weight_decay: float = 1e-2,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        random_state: int = 0,
        verbose: int = 0,
    ):
        self.kind = kind
        self.n_layers = n_layers
        self.embed_dim = embed_dim
        self.edge_embed_dim = edge_embed_dim
        self.hidden = hidden
        self.task_hidden = task_hidden
        self.aggregators = aggregators
        self.residual = residual
        self.use_nnn_edges = use_nnn_edges
        self.target_mode = target_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.random_state = random_state
        self.verbose = verbose

    # -- helpers ----------------------------------------------------------

    def _check_params(self):
        if self.target_mode not in TARGET_MODES:
            raise ContractError(f"target_mode must be one of {TARGET_MODES}, got {self.target_mode!r}")
        if int(self.epochs) < 1 or int(self.batch_size) < 1:
            raise ContractError("epochs and batch_size must be >= 1")

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    @property
    def _predict_nnn(self) -> bool:
        return self.target_mode == "nn+nnn"

    def _batch(self, graphs) -> GraphBatch:
        return GraphBatch.from_graphs(
            graphs, self.scaler_, predict_nnn=self._predict_nnn, use_nnn_edges=self.config_.use_nnn_edges
        )

    def _loss_tensor(self, params_t, batch: GraphBatch):
        out = forward(params_t, batch, self.config_)
        pred = out * self.scaler_.target_std + self.scaler_.target_mean
        diff = pred - Tensor(batch.targets)
        return diff.square().sum()

    # -- API --------------------------------------------------------------

    def fit(self, X, y=None, eval_set=None):
        """Train on graphs ``X``; ``eval_set`` graphs give the per-epoch validation loss."""
        self._check_params()
        graphs = check_graphs(X)
        val = check_graphs(eval_set, "eval_set") if eval_set is not None and len(eval_set) else None
        g0 = graphs[0]
        if self._predict_nnn and not g0.has_nnn:
            raise ContractError("target_mode 'nn+nnn' needs a case with NNN edge features")
        self.config_ = ModelConfig(
            node_in=g0.node_features.shape[1],
            edge_in=g0.nn_edge_features.shape[1],
            kind=self.kind,
            n_layers=self.n_layers,
            embed_dim=self.embed_dim,
            edge_embed_dim=self.edge_embed_dim,
            hidden=self.hidden,
            task_hidden=self.task_hidden,
            aggregators=tuple(self.aggregators),
            residual=self.residual,
            use_nnn_edges=self.use_nnn_edges,
        )
        self.scaler_ = Standardizer.fit(graphs, predict_nnn=self._predict_nnn)
        self.degree_histogram_ = degree_histogram(graphs, self.use_nnn_edges)
        self.n_features_in_ = self.config_.node_in
        self.params_ = init_params(self.config_, derive_seed(self.random_state, "init"))
        self.optimizer_state_ = AdamWState()
        self.history_ = []
        rng = substream(self.random_state, "shuffle")
        bs = int(self.batch_size)
        val_batch = self._batch(val) if val is not None else None
        n_val_targets = val_batch.targets.size if val_batch is not None else 0
        for epoch in range(int(self.epochs)):
            lr = lr_schedule(epoch, int(self.epochs), self.lr_start, self.lr_end)
            perm = rng.permutation(len(graphs))
            total, n_targets = 0.0, 0
            for start in range(0, len(graphs), bs):
                batch = self._batch([graphs[i] for i in perm[start : start + bs]])
                params_t = as_tensors(self.params_)
                loss = self._loss_tensor(params_t, batch)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}",
                        diagnostics={
                            "epoch": epoch,
                            "lr": lr,
                            "loss": value,
                            "param_norms": {k: float(np.linalg.norm(v)) for k, v in self.params_.items()},
                        },
                    )
                loss.backward()
                grads = {k: t.grad for k, t in params_t.items()}
                adamw_step(
                    self.params_, grads, self.optimizer_state_, lr,
                    self.beta1, self.beta2, self.eps, self.weight_decay,
                )
                total += value
                n_targets += batch.targets.size
            row = {"epoch": epoch, "train_loss": total / n_targets, "val_loss": float("nan"), "lr": lr}
            if val_batch is not None:
                row["val_loss"] = float(self._loss_tensor(as_tensors(self.params_, False), val_batch).data) / n_val_targets
            self.history_.append(row)
            if self.verbose and (epoch % max(1, int(self.verbose)) == 0 or epoch == self.epochs - 1):
                logger.info("epoch %d lr %.3e train %.4e val %.4e", epoch, lr, row["train_loss"], row["val_loss"])
        return self

    def predict_graphs(self, X) -> List[np.ndarray]:
        """Per-graph prediction arrays (um)."""
        self._check_fitted()
        graphs = check_graphs(X)
        batch = self._batch(graphs)
        out = forward(as_tensors(self.params_, False), batch, self.config_).data
        pred = out * self.scaler_.target_std + self.scaler_.target_mean
        return [pred[batch.graph_of_target == k] for k in range(len(graphs))]

    def predict(self, X) -> np.ndarray:
        parts = self.predict_graphs(X)
        return np.concatenate(parts) if parts else np.zeros(0)

    def targets(self, X) -> np.ndarray:
        return stack_targets(check_graphs(X), self.target_mode)

    def score(self, X, y=None, sample_weight=None):
        from .training import metric_r2

        y_true = self.targets(X) if y is None else np.asarray(y)
        return metric_r2(y_true, self.predict(X))

    # -- persistence ------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None) -> Path:
        """Checkpoint directory: ``manifest.json`` plus one little-endian float64
        blob per named tensor under ``tensors/``."""
        self._check_fitted()
        path = Path(path)
        (path / "tensors").mkdir(parents=True, exist_ok=True)
        tensors: Dict[str, np.ndarray] = {f"param/{k}": v for k, v in self.params_.items()}
        tensors.update({f"scaler/{k}": v for k, v in self.scaler_.to_arrays().items()})
        entries = {}
        for name, arr in tensors.items():
            fname = name.replace("/", "__") + ".f64"
            (path / "tensors" / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            entries[name] = {"file": f"tensors/{fname}", "shape": list(np.shape(arr))}
        manifest = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "estimator_params": _jsonable(self.get_params()),
            "model_config": self.config_.to_json(),
            "layer_sizes": {k: list(v.shape) for k, v in self.params_.items()},
            "seed": self.random_state,
            "degree_histogram": self.degree_histogram_,
            "optimizer_step": self.optimizer_state_.step,
            "tensors": entries,
        }
        if extra:
            manifest["extra"] = extra
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "EdgeDistanceRegressor":
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {manifest.get('checkpoint_version')}")
        params = dict(manifest["estimator_params"])
        params["aggregators"] = tuple(params["aggregators"])
        est = cls(**params)
        arrays = {}
        for name, spec in manifest["tensors"].items():
            raw = np.frombuffer((path / spec["file"]).read_bytes(), dtype="<f8").astype(np.float64)
            arrays[name] = raw.reshape(spec["shape"])
        est.config_ = ModelConfig.from_json(manifest["model_config"])
        est.params_ = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        est.scaler_ = Standardizer.from_arrays({k[len("scaler/"):]: v for k, v in arrays.items() if k.startswith("scaler/")})
        est.degree_histogram_ = manifest["degree_histogram"]
        est.n_features_in_ = est.config_.node_in
        est.optimizer_state_ = AdamWState(step=manifest.get("optimizer_step", 0))
        est.history_ = []
        est.checkpoint_extra_ = manifest.get("extra", {})
        return est


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out
