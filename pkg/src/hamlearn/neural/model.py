"""Principal-neighbourhood-aggregation graph network and per-edge task network.

A model maps a batch of lattice graphs to one predicted length displacement per
target edge. Graph size never enters the parameter shapes, so a model fitted on
small clusters runs unchanged on larger ones.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import ContractError
from .autodiff import (
    Segments,
    Tensor,
    concat,
    segment_max,
    segment_mean,
    segment_min,
    segment_sum,
)

AGGREGATORS = ("mean", "min", "max", "sum")
_AGG_FN = {"mean": segment_mean, "min": segment_min, "max": segment_max, "sum": segment_sum}
N_EDGE_TYPES = 2  # NN, NNN
TARGET_SCALE_FLOOR_UM = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    node_in: int
    edge_in: int
    kind: str = "gnn"  # "gnn" or "mlp" (task network on edge features alone)
    n_layers: int = 4
    embed_dim: int = 32
    edge_embed_dim: int = 32
    hidden: int = 64
    task_hidden: int = 64
    aggregators: Tuple[str, ...] = AGGREGATORS
    residual: bool = True
    use_nnn_edges: bool = True

    def __post_init__(self):
        if self.kind not in ("gnn", "mlp"):
            raise ContractError(f"model kind must be 'gnn' or 'mlp', got {self.kind!r}")
        aggs = tuple(self.aggregators)
        if not aggs or any(a not in AGGREGATORS for a in aggs) or len(set(aggs)) != len(aggs):
            raise ContractError(f"aggregators must be a non-empty subset of {AGGREGATORS}, got {aggs}")
        object.__setattr__(self, "aggregators", aggs)
        if self.n_layers < 0 or self.embed_dim < 1:
            raise ContractError("n_layers must be >= 0 and embed_dim >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["aggregators"] = list(self.aggregators)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["aggregators"] = tuple(d["aggregators"])
        return cls(**d)

    @property
    def task_in(self) -> int:
        emb = 2 * self.embed_dim if self.kind == "gnn" else 0
        return emb + self.edge_in + N_EDGE_TYPES

    def layer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Name -> shape of every trainable tensor, in a fixed order."""
        shapes: Dict[str, Tuple[int, ...]] = {}

        def mlp(prefix, widths):
            for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                shapes[f"{prefix}.{k}.W"] = (a, b)
                shapes[f"{prefix}.{k}.b"] = (b,)

        if self.kind == "gnn":
            d, de = self.embed_dim, self.edge_embed_dim
            mlp("node_enc", [self.node_in, d])
            # three-layer perceptron lifting raw edge features (+ edge type)
            mlp("edge_enc", [self.edge_in + N_EDGE_TYPES, self.hidden, self.hidden, de])
            for layer in range(self.n_layers):
                mlp(f"pna{layer}.msg", [2 * d + de, self.hidden, d])
                mlp(f"pna{layer}.comb", [len(self.aggregators) * d, d])
        mlp("task", [self.task_in, self.task_hidden, self.task_hidden, 1])
        return shapes


def init_params(config: ModelConfig, seed: int) -> Dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = config.layer_shapes()
    for name, shape in shapes.items():
        fan_in = shape[0] if name.endswith(".W") else shapes[name[:-2] + ".W"][0]
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def count_parameters(params: Dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class Standardizer:
    """Per-channel affine maps for node features, NN/NNN edge features and targets."""

    node_mean: np.ndarray
    node_std: np.ndarray
    nn_mean: np.ndarray
    nn_std: np.ndarray
    nnn_mean: np.ndarray
    nnn_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    @staticmethod
    def _stats(rows: List[np.ndarray], width: int):
        if not rows or sum(r.shape[0] for r in rows) == 0:
            return np.zeros(width), np.ones(width)
        x = np.concatenate(rows, axis=0)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant channels (e.g. all-ones features) are centred but not scaled
        std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
        return mean, std

    @classmethod
    def fit(cls, graphs: Sequence, predict_nnn: bool = False) -> "Standardizer":
        g0 = graphs[0]
        fn, fe = g0.node_features.shape[1], g0.nn_edge_features.shape[1]
        node_mean, node_std = cls._stats([g.node_features for g in graphs], fn)
        nn_mean, nn_std = cls._stats([g.nn_edge_features for g in graphs], fe)
        nnn_mean, nnn_std = cls._stats([g.nnn_edge_features for g in graphs], fe)
        ys = [g.nn_targets for g in graphs]
        if predict_nnn:
            ys += [g.nnn_targets for g in graphs]
        y = np.concatenate(ys)
        t_mean, t_std = float(y.mean()), float(y.std())
        if t_std <= 1e-12 * max(1.0, abs(t_mean)):
            # no spread to learn: one nanometre keeps output noise far below metric resolution
            t_std = TARGET_SCALE_FLOOR_UM
        return cls(node_mean, node_std, nn_mean, nn_std, nnn_mean, nnn_std, t_mean, t_std)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        d = {k: np.asarray(v, dtype=np.float64) for k, v in self.__dict__.items()}
        d["target_mean"] = np.array([self.target_mean])
        d["target_std"] = np.array([self.target_std])
        return d

    @classmethod
    def from_arrays(cls, d: Dict[str, np.ndarray]) -> "Standardizer":
        kw = {k: np.asarray(d[k], dtype=np.float64) for k in ("node_mean", "node_std", "nn_mean", "nn_std", "nnn_mean", "nnn_std")}
        return cls(**kw, target_mean=float(np.ravel(d["target_mean"])[0]), target_std=float(np.ravel(d["target_std"])[0]))


@dataclass
class GraphBatch:
    """Disjoint union of graphs with precomputed index structures.

    Undirected edges carry features; each becomes two directed message edges.
    Target edges are the NN edges of every graph, optionally followed by the NNN
    edges, in graph order.
    """

    n_nodes: int
    node_x: np.ndarray
    edge_x: np.ndarray  # (n_und, edge_in + N_EDGE_TYPES)
    src: np.ndarray
    dst: np.ndarray
    dir_edge: np.ndarray  # directed edge -> undirected edge row
    target_i: np.ndarray
    target_j: np.ndarray
    target_edge: np.ndarray
    targets: np.ndarray
    graph_of_target: np.ndarray
    seg_dst: Segments = field(repr=False)
    seg_src: Segments = field(repr=False)
    seg_dir_edge: Segments = field(repr=False)
    seg_ti: Segments = field(repr=False)
    seg_tj: Segments = field(repr=False)
    seg_te: Segments = field(repr=False)

    @classmethod
    def from_graphs(
        cls,
        graphs: Sequence,
        scaler: Standardizer,
        predict_nnn: bool = False,
        use_nnn_edges: bool = True,
    ) -> "GraphBatch":
        if not graphs:
            raise ContractError("cannot batch zero graphs")
        node_x, edge_x, pairs = [], [], []
        t_i, t_j, t_e, ys, gid = [], [], [], [], []
        offset = 0
        n_und = 0
        fn = scaler.node_mean.size
        fe = scaler.nn_mean.size
        for k, g in enumerate(graphs):
            if g.node_features.shape[1] != fn or g.nn_edge_features.shape[1] != fe:
                raise ContractError(
                    f"graph feature widths ({g.node_features.shape[1]}, {g.nn_edge_features.shape[1]}) "
                    f"do not match the model ({fn}, {fe})"
                )
            nn_e, nnn_e = g.edges()
            node_x.append((g.node_features - scaler.node_mean) / scaler.node_std)
            onehot_nn = np.tile([1.0, 0.0], (len(nn_e), 1))
            edge_x.append(np.hstack([(g.nn_edge_features - scaler.nn_mean) / scaler.nn_std, onehot_nn]))
            pairs.append(nn_e + offset)
            nn_rows = np.arange(n_und, n_und + len(nn_e))
            n_und += len(nn_e)
            nnn_rows = np.zeros(0, dtype=np.int64)
            if g.has_nnn and use_nnn_edges:
                if g.nnn_edge_features.shape[1] != fe:
                    raise ContractError("NNN edge features must match the NN edge width")
                onehot = np.tile([0.0, 1.0], (len(nnn_e), 1))
                edge_x.append(np.hstack([(g.nnn_edge_features - scaler.nnn_mean) / scaler.nnn_std, onehot]))
                pairs.append(nnn_e + offset)
                nnn_rows = np.arange(n_und, n_und + len(nnn_e))
                n_und += len(nnn_e)
            t_i.append(nn_e[:, 0] + offset)
            t_j.append(nn_e[:, 1] + offset)
            t_e.append(nn_rows)
            ys.append(g.nn_targets)
            gid.append(np.full(len(nn_e), k))
            if predict_nnn:
                if not (g.has_nnn and use_nnn_edges):
                    raise ContractError("NN+NNN targets need a case with NNN edges")
                t_i.append(nnn_e[:, 0] + offset)
                t_j.append(nnn_e[:, 1] + offset)
                t_e.append(nnn_rows)
                ys.append(g.nnn_targets)
                gid.append(np.full(len(nnn_e), k))
            offset += g.n_nodes
        und = np.concatenate(pairs).astype(np.int64)
        n_und_edges = und.shape[0]
        # message edges in both directions; message j->i lands on i
        src = np.concatenate([und[:, 0], und[:, 1]])
        dst = np.concatenate([und[:, 1], und[:, 0]])
        dir_edge = np.concatenate([np.arange(n_und_edges), np.arange(n_und_edges)])
        ti = np.concatenate(t_i).astype(np.int64)
        tj = np.concatenate(t_j).astype(np.int64)
        te = np.concatenate(t_e).astype(np.int64)
        # canonical (lower index first) ordering for the task input
        lo, hi = np.minimum(ti, tj), np.maximum(ti, tj)
        return cls(
            n_nodes=offset,
            node_x=np.concatenate(node_x, axis=0),
            edge_x=np.concatenate(edge_x, axis=0),
            src=src,
            dst=dst,
            dir_edge=dir_edge,
            target_i=lo,
            target_j=hi,
            target_edge=te,
            targets=np.concatenate(ys),
            graph_of_target=np.concatenate(gid),
            seg_dst=Segments(dst, offset),
            seg_src=Segments(src, offset),
            seg_dir_edge=Segments(dir_edge, n_und_edges),
            seg_ti=Segments(lo, offset),
            seg_tj=Segments(hi, offset),
            seg_te=Segments(te, n_und_edges),
        )


def _dense(params, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def mlp_forward(params: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Affine layers with softplus in between; the last layer stays affine."""
    n = 0
    while f"{prefix}.{n}.W" in params:
        n += 1
    if n == 0:
        raise ContractError(f"no layers named {prefix}.*")
    w0 = params[f"{prefix}.0.W"]
    if x.shape[-1] != w0.shape[0]:
        raise ContractError(f"{prefix}: input width {x.shape[-1]} but first layer expects {w0.shape[0]}")
    for k in range(n):
        x = _dense(params, f"{prefix}.{k}", x)
        if k < n - 1:
            x = x.softplus()
    return x


def pna_layer(h: Tensor, e: Tensor, batch: GraphBatch, params: Dict[str, Tensor], layer: int, config: ModelConfig) -> Tensor:
    """One round of message passing with a learned combination of aggregators."""
    h_src = h.take_rows(batch.src, batch.seg_src)
    h_dst = h.take_rows(batch.dst, batch.seg_dst)
    e_dir = e.take_rows(batch.dir_edge, batch.seg_dir_edge)
    msg = mlp_forward(params, f"pna{layer}.msg", concat([h_src, h_dst, e_dir], axis=1))
    aggs = [_AGG_FN[a](msg, batch.seg_dst) for a in config.aggregators]
    out = mlp_forward(params, f"pna{layer}.comb", concat(aggs, axis=1))
    return out + h if config.residual else out


def node_embeddings(params: Dict[str, Tensor], batch: GraphBatch, config: ModelConfig) -> Tuple[Tensor, Tensor]:
    h = mlp_forward(params, "node_enc", Tensor(batch.node_x))
    e = mlp_forward(params, "edge_enc", Tensor(batch.edge_x))
    for layer in range(config.n_layers):
        h = pna_layer(h, e, batch, params, layer, config)
    return h, e


def task_predict(params: Dict[str, Tensor], batch: GraphBatch, config: ModelConfig, h: Optional[Tensor] = None) -> Tensor:
    """Standardised prediction for every target edge."""
    chi = Tensor(batch.edge_x).take_rows(batch.target_edge)
    if config.kind != "gnn":
        return mlp_forward(params, "task", chi).reshape(-1)
    hi = h.take_rows(batch.target_i, batch.seg_ti)
    hj = h.take_rows(batch.target_j, batch.seg_tj)
    # average over both endpoint orders so the output ignores node labels
    n = chi.shape[0]
    x = concat([concat([hi, hj, chi], axis=1), concat([hj, hi, chi], axis=1)], axis=0)
    y = mlp_forward(params, "task", x).reshape(-1)
    return (y.take_rows(np.arange(n)) + y.take_rows(np.arange(n, 2 * n))) * 0.5


def forward(params: Dict[str, Tensor], batch: GraphBatch, config: ModelConfig) -> Tensor:
    """Predictions in standardised target units; callers rescale."""
    h = None
    if config.kind == "gnn":
        h, _ = node_embeddings(params, batch, config)
    return task_predict(params, batch, config, h)


def as_tensors(params: Dict[str, np.ndarray], requires_grad: bool = True) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def degree_histogram(graphs: Sequence, use_nnn_edges: bool = True) -> List[int]:
    """Counts of nodes by number of message neighbours over ``graphs``."""
    hist: Dict[int, int] = {}
    for g in graphs:
        nn_e, nnn_e = g.edges()
        edges = [nn_e] + ([nnn_e] if use_nnn_edges else [])
        und = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=int)
        deg = np.bincount(und.ravel(), minlength=g.n_nodes)
        for d, c in zip(*np.unique(deg, return_counts=True)):
            hist[int(d)] = hist.get(int(d), 0) + int(c)
    top = max(hist) if hist else 0
    return [hist.get(d, 0) for d in range(top + 1)]
