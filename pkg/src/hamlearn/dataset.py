"""Graph datasets over a transverse-field history, for the six training scenarios.

Scenario (case) feature layout, with ``W = len(omega_history)``:

====  ==============  =======================  ========================
case  node (width W)  NN edge                  NNN edge
====  ==============  =======================  ========================
1     <Z_i>           nominal spacing (W)      none
2     <Z_i>           <Z_i Z_j> (W)            none
3     <Z_i>           <Z_i Z_j> (W)            <Z_i Z_j> (W)
4     <Z_i>           <Z_i Z_j> (W)            ones (W)
5     ones            <Z_i Z_j> (W)            ones (W)
6     <Z_i>           ZZ then XX (2W)          ZZ then XX (2W)
====  ==============  =======================  ========================

Targets are always the edge length minus its nominal value, in um: ``a`` for
NN edges and ``a * sqrt(2)`` for NNN edges.
"""
from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._rng import derive_seed, substream
from .exceptions import ConfigurationError, ContractError, SolverError
from .lattice import (
    C6_DEFAULT,
    DISORDER_DEFAULT_UM,
    SPACING_DEFAULT_UM,
    AdjacencySets,
    Geometry,
    adjacency,
    build_geometry,
    couplings,
    edge_displacements,
)
from .sampler import estimate_observables, sample_bitstrings
from .spectral import ObservableSet, StateVector, exact_observables, ground_state, spin_signs

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CASES = (1, 2, 3, 4, 5, 6)
TRAIN_SIZES_DEFAULT = ((3, 3), (3, 4), (4, 4))
EXTRAPOLATION_SIZES_DEFAULT = ((4, 5), (5, 4), (5, 5))


@dataclass(frozen=True)
class OmegaHistory:
    values: Tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ConfigurationError("omega history must not be empty")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigurationError("omega history must be strictly increasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def default(cls) -> "OmegaHistory":
        # -900/9 ... 900/9 rad/us in steps of 200/9
        return cls(tuple((-900.0 + 200.0 * k) / 9.0 for k in range(10)))

    def __len__(self):
        return len(self.values)


def parse_case(case) -> int:
    tag = str(case).lstrip("#")
    if not tag.isdigit() or int(tag) not in CASES:
        raise ConfigurationError(f"unknown case tag {case!r}; expected one of 1..6")
    return int(tag)


def parse_size(text) -> Tuple[int, int]:
    if isinstance(text, (tuple, list)):
        r, c = text
        return int(r), int(c)
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", str(text))
    if not m:
        raise ConfigurationError(f"cannot parse lattice size {text!r}; expected RxC")
    return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class ObservationMode:
    """How features are measured: exactly, or from ``n_samples`` snapshots per basis."""

    kind: str = "exact"
    n_samples: int = 0
    bases: str = "z"
    budget: str = "equal"  # "equal": n per basis; "split": n shared between bases

    @classmethod
    def parse(cls, text: str, budget: str = "equal") -> "ObservationMode":
        parts = str(text).lower().split(":")
        if parts[0] == "exact" and len(parts) == 1:
            return cls()
        if parts[0] == "snapshot" and 2 <= len(parts) <= 3:
            try:
                n = int(parts[1])
            except ValueError:
                raise ConfigurationError(f"bad snapshot count in mode {text!r}") from None
            bases = parts[2] if len(parts) == 3 else "z"
            if n < 1 or bases not in ("z", "zx"):
                raise ConfigurationError(f"bad snapshot mode {text!r}")
            if budget not in ("equal", "split"):
                raise ConfigurationError(f"unknown snapshot budget policy {budget!r}")
            return cls("snapshot", n, bases, budget)
        raise ConfigurationError(f"unknown mode {text!r}; use exact or snapshot:N[:z|zx]")

    def __str__(self):
        if self.kind == "exact":
            return "exact"
        return f"snapshot:{self.n_samples}:{self.bases}"

    @property
    def provenance(self) -> str:
        return "exact" if self.kind == "exact" else f"snapshot({self.n_samples})"

    def per_basis_samples(self) -> int:
        if self.budget == "split" and self.bases == "zx":
            return max(1, self.n_samples // 2)
        return self.n_samples


@dataclass
class GraphSample:
    rows: int
    cols: int
    case: int
    node_features: np.ndarray
    nn_edge_features: np.ndarray
    nnn_edge_features: np.ndarray
    nn_targets: np.ndarray
    nnn_targets: np.ndarray
    provenance: str = "exact"
    geometry_seed: int = 0

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def size(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def has_nnn(self) -> bool:
        return self.nnn_edge_features.shape[0] > 0

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        adj = adjacency(self.rows, self.cols)
        nnn = adj.nnn_edges if self.has_nnn else np.zeros((0, 2), dtype=np.int64)
        return adj.nn_edges, nnn

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}


_TENSOR_FIELDS = (
    "node_features",
    "nn_edge_features",
    "nnn_edge_features",
    "nn_targets",
    "nnn_targets",
)


def feature_widths(case: int, n_omega: int) -> Tuple[int, int, int]:
    """(node, NN edge, NNN edge) channel counts; NNN is 0 when the case has no NNN edges."""
    case = parse_case(case)
    edge = 2 * n_omega if case == 6 else n_omega
    return n_omega, edge, (edge if case >= 3 else 0)


def assemble_graph(
    case,
    geom: Geometry,
    per_omega_observables: Sequence[ObservableSet],
    adj: AdjacencySets,
    omega: Optional[OmegaHistory] = None,
    provenance: str = "exact",
) -> GraphSample:
    case = parse_case(case)
    obs = list(per_omega_observables)
    if not obs:
        raise ContractError("need one ObservableSet per omega value, got none")
    if omega is not None and len(obs) != len(omega):
        raise ContractError(f"{len(omega)} omega values but {len(obs)} observable sets")
    if (adj.rows, adj.cols) != (geom.rows, geom.cols):
        raise ContractError("adjacency and geometry describe different lattices")
    n_nn, n_nnn = len(adj.nn_edges), len(adj.nnn_edges)
    for o in obs:
        if o.magnetization_z.shape != (geom.n_atoms,) or o.chi_z_nn.shape != (n_nn,):
            raise ContractError("observable set does not match the geometry")
    w = len(obs)
    mag = np.stack([o.magnetization_z for o in obs], axis=1)
    zz_nn = np.stack([o.chi_z_nn for o in obs], axis=1)
    zz_nnn = np.stack([o.chi_z_nnn for o in obs], axis=1).reshape(n_nnn, w)

    node = np.ones_like(mag) if case == 5 else mag
    if case == 1:
        nn = np.full((n_nn, w), geom.nominal_spacing_um)
    elif case == 6:
        if any(o.chi_x_nn is None for o in obs):
            raise ContractError("case 6 needs X-basis correlators for every omega")
        xx_nn = np.stack([o.chi_x_nn for o in obs], axis=1)
        nn = np.concatenate([zz_nn, xx_nn], axis=1)
    else:
        nn = zz_nn
    if case <= 2:
        nnn = np.zeros((0, w))
    elif case == 3:
        nnn = zz_nnn
    elif case in (4, 5):
        nnn = np.ones((n_nnn, w))
    else:
        xx_nnn = np.stack([o.chi_x_nnn for o in obs], axis=1).reshape(n_nnn, w)
        nnn = np.concatenate([zz_nnn, xx_nnn], axis=1)

    a = geom.nominal_spacing_um
    return GraphSample(
        rows=geom.rows,
        cols=geom.cols,
        case=case,
        node_features=np.ascontiguousarray(node, dtype=np.float64),
        nn_edge_features=np.ascontiguousarray(nn, dtype=np.float64),
        nnn_edge_features=np.ascontiguousarray(nnn, dtype=np.float64),
        nn_targets=edge_displacements(geom, adj.nn_edges, a),
        nnn_targets=edge_displacements(geom, adj.nnn_edges, a * np.sqrt(2.0)),
        provenance=provenance,
        geometry_seed=geom.seed,
    )


def observe_geometry(
    geom: Geometry,
    omega: OmegaHistory,
    mode: ObservationMode,
    snapshot_seed: int,
    need_x: bool,
    delta: float = 0.0,
    c6: float = C6_DEFAULT,
    solver_tol: float = 1e-10,
) -> List[ObservableSet]:
    """One ObservableSet per omega value.

    The ground state at -omega is the global Z-string applied to the one at +omega,
    so each |omega| is solved once.
    """
    adj = adjacency(geom.rows, geom.cols)
    j = couplings(geom, c6)
    n = geom.n_atoms
    states: Dict[float, StateVector] = {}
    out = []
    for k, om in enumerate(omega.values):
        key = abs(om)
        if key not in states:
            try:
                _, states[key] = ground_state(j, key, delta, tol=solver_tol)
            except SolverError as exc:
                raise SolverError(
                    f"ground state failed for {geom.rows}x{geom.cols} geometry seed {geom.seed} "
                    f"at omega={key}: {exc}",
                    residual=exc.residual,
                    iterations=exc.iterations,
                ) from exc
        psi = states[key]
        if om < 0:
            zstring = np.prod(spin_signs(n), axis=0, dtype=np.float64)
            psi = StateVector(n, zstring * psi.amplitudes)
        if mode.kind == "exact":
            out.append(exact_observables(psi, adj, om, delta, with_x=need_x))
            continue
        n_per = mode.per_basis_samples()
        snap_z = sample_bitstrings(psi, "Z", n_per, derive_seed(snapshot_seed, k, "Z"))
        snap_x = None
        if need_x or mode.bases == "zx":
            snap_x = sample_bitstrings(psi, "X", n_per, derive_seed(snapshot_seed, k, "X"))
        out.append(estimate_observables(snap_z, snap_x, adj, om, delta))
    return out


@dataclass
class DatasetFile:
    manifest: dict
    graphs: List[GraphSample] = field(default_factory=list)

    @property
    def case(self) -> int:
        return int(self.manifest["case"])

    @property
    def omega_values(self) -> List[float]:
        return list(self.manifest["omega_values"])

    def sizes(self) -> List[Tuple[int, int]]:
        return sorted({g.size for g in self.graphs})

    def by_size(self) -> Dict[Tuple[int, int], List[GraphSample]]:
        out: Dict[Tuple[int, int], List[GraphSample]] = {}
        for g in self.graphs:
            out.setdefault(g.size, []).append(g)
        return out

    def subset(self, graphs: Sequence[GraphSample], **manifest_updates) -> "DatasetFile":
        manifest = dict(self.manifest)
        counts: Dict[str, int] = {}
        for g in graphs:
            key = f"{g.rows}x{g.cols}"
            counts[key] = counts.get(key, 0) + 1
        manifest["counts"] = counts
        manifest["sizes"] = [f"{r}x{c}" for r, c in sorted({g.size for g in graphs})]
        manifest.update(manifest_updates)
        return DatasetFile(manifest=manifest, graphs=list(graphs))

    def __len__(self):
        return len(self.graphs)

    # -- persistence --------------------------------------------------------

    def save(self, path, fmt: str = "binary") -> Path:
        """Write ``path`` (JSON lines: manifest first, then one record per graph).

        With ``fmt="binary"`` the tensors go to ``path`` with suffix ``.bin`` as
        little-endian float64 and records hold byte offsets; ``"jsonl-full"``
        inlines them as decimal floats.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt not in ("binary", "jsonl-full"):
            raise ConfigurationError(f"unknown dataset format {fmt!r}")
        manifest = dict(self.manifest, format_version=FORMAT_VERSION, storage=fmt)
        blob_path = path.with_suffix(".bin")
        if fmt == "binary":
            manifest["blob"] = blob_path.name
        lines = [json.dumps(manifest, sort_keys=True)]
        offset = 0
        blob = open(blob_path, "wb") if fmt == "binary" else None
        try:
            for g in self.graphs:
                rec = {
                    "rows": g.rows,
                    "cols": g.cols,
                    "case": g.case,
                    "provenance": g.provenance,
                    "geometry_seed": g.geometry_seed,
                    "tensors": {},
                }
                for name, arr in g.tensors().items():
                    arr = np.ascontiguousarray(arr, dtype="<f8")
                    if blob is None:
                        rec["tensors"][name] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
                    else:
                        data = arr.tobytes()
                        blob.write(data)
                        rec["tensors"][name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
                        offset += len(data)
                lines.append(json.dumps(rec))
        finally:
            if blob is not None:
                blob.close()
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetFile":
        path = Path(path)
        with open(path) as fh:
            manifest = json.loads(fh.readline())
            records = [json.loads(line) for line in fh if line.strip()]
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported dataset format version {manifest.get('format_version')}")
        # storage keys describe the file, not the dataset
        storage = manifest.pop("storage", "binary")
        blob_name = manifest.pop("blob", None)
        blob = (path.parent / blob_name).read_bytes() if storage == "binary" else None
        graphs = []
        for rec in records:
            tensors = {}
            for name, spec in rec["tensors"].items():
                if blob is None:
                    arr = np.asarray(spec["values"], dtype=np.float64)
                else:
                    arr = np.frombuffer(blob, dtype="<f8", count=spec["nbytes"] // 8, offset=spec["offset"])
                    arr = arr.astype(np.float64)
                tensors[name] = arr.reshape(spec["shape"])
            graphs.append(
                GraphSample(
                    rows=rec["rows"],
                    cols=rec["cols"],
                    case=rec["case"],
                    provenance=rec["provenance"],
                    geometry_seed=rec["geometry_seed"],
                    **tensors,
                )
            )
        return cls(manifest=manifest, graphs=graphs)


def _realization(args) -> GraphSample:
    (rows, cols, k, case, omega, mode, master_seed, spacing, disorder, delta, c6, tol) = args
    geom = build_geometry(rows, cols, spacing, disorder, derive_seed(master_seed, "geometry", rows, cols, k))
    need_x = case == 6
    if case == 6 and mode.kind == "snapshot" and mode.bases != "zx":
        raise ContractError("case 6 needs X-basis snapshots; use mode snapshot:N:zx")
    obs = observe_geometry(
        geom,
        omega,
        mode,
        derive_seed(master_seed, "snapshot", rows, cols, k),
        need_x=need_x,
        delta=delta,
        c6=c6,
        solver_tol=tol,
    )
    return assemble_graph(case, geom, obs, adjacency(rows, cols), omega, provenance=mode.provenance)


def generate_dataset(
    sizes: Sequence,
    per_size_count: int,
    omega: Optional[OmegaHistory] = None,
    case=3,
    mode="exact",
    master_seed: int = 0,
    spacing_um: float = SPACING_DEFAULT_UM,
    disorder_amplitude_um: float = DISORDER_DEFAULT_UM,
    delta: float = 0.0,
    c6: float = C6_DEFAULT,
    jobs: int = 1,
    per_omega_graphs: bool = False,
    solver_tol: float = 1e-10,
    progress=None,
) -> DatasetFile:
    """``per_size_count`` disorder realizations for every lattice size, one stacked
    graph per realization. Deterministic given ``master_seed``; the geometry of
    realization ``k`` of a size does not depend on which other sizes are requested."""
    omega = omega or OmegaHistory.default()
    case = parse_case(case)
    mode = mode if isinstance(mode, ObservationMode) else ObservationMode.parse(mode)
    sizes = [parse_size(s) for s in sizes]
    if per_size_count < 0:
        raise ConfigurationError("per_size_count must be non-negative")
    if case == 6 and mode.kind == "snapshot" and mode.bases != "zx":
        raise ConfigurationError("case 6 needs X-basis snapshots; use mode snapshot:N:zx")
    tasks = [
        (r, c, k, case, omega, mode, master_seed, spacing_um, disorder_amplitude_um, delta, c6, solver_tol)
        for r, c in sizes
        for k in range(per_size_count)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            graphs = list(pool.map(_realization, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        graphs = []
        for t in tasks:
            graphs.append(_realization(t))
            if progress is not None:
                progress(len(graphs), len(tasks))
    manifest = {
        "format_version": FORMAT_VERSION,
        "case": case,
        "omega_values": list(omega.values),
        "sizes": [f"{r}x{c}" for r, c in sizes],
        "counts": {f"{r}x{c}": per_size_count for r, c in sizes},
        "mode": str(mode),
        "snapshot_budget": mode.budget,
        "master_seed": int(master_seed),
        "spacing_um": spacing_um,
        "disorder_amplitude_um": disorder_amplitude_um,
        "delta": delta,
        "c6": c6,
        "per_omega_graphs": bool(per_omega_graphs),
    }
    ds = DatasetFile(manifest=manifest, graphs=graphs)
    return expand_per_omega(ds) if per_omega_graphs else ds


def expand_per_omega(ds: DatasetFile) -> DatasetFile:
    """Split each stacked graph into one single-channel graph per omega value."""
    w = len(ds.omega_values)
    out = []
    for g in ds.graphs:
        for k in range(w):
            cols = [k, k + w] if g.case == 6 else [k]
            out.append(
                replace(
                    g,
                    node_features=g.node_features[:, [k]].copy(),
                    nn_edge_features=g.nn_edge_features[:, cols].copy(),
                    nnn_edge_features=g.nnn_edge_features[:, cols].copy(),
                )
            )
    manifest = dict(ds.manifest, per_omega_graphs=True)
    return ds.subset(out, **{k: v for k, v in manifest.items() if k not in ("counts", "sizes")})


def recast_case(ds: DatasetFile, case) -> DatasetFile:
    """Features of ``case`` (1..5) rebuilt from a case-3 dataset.

    Cases 1..5 only use the Z-basis quantities a case-3 graph already stores,
    so this equals generating the other case from scratch with the same seeds.
    """
    case = parse_case(case)
    if ds.case != 3:
        raise ContractError(f"recasting starts from a case-3 dataset, got case {ds.case}")
    if case == 6:
        raise ContractError("case 6 needs X-basis correlators, which a case-3 dataset does not hold")
    out = []
    for g in ds.graphs:
        w = g.node_features.shape[1]
        n_nnn = g.nnn_edge_features.shape[0]
        node = np.ones_like(g.node_features) if case == 5 else g.node_features.copy()
        if case == 1:
            a = ds.manifest.get("spacing_um", SPACING_DEFAULT_UM)
            nn = np.full_like(g.nn_edge_features, a)
        else:
            nn = g.nn_edge_features.copy()
        if case <= 2:
            nnn = np.zeros((0, w))
        elif case == 3:
            nnn = g.nnn_edge_features.copy()
        else:
            nnn = np.ones((n_nnn, w))
        out.append(replace(g, case=case, node_features=node, nn_edge_features=nn, nnn_edge_features=nnn))
    return ds.subset(out, case=case)


def split_dataset(ds: DatasetFile, test_fraction: float, seed: int = 0) -> Tuple[DatasetFile, DatasetFile]:
    """Seeded split by realization, stratified per lattice size."""
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    train, test = [], []
    for (r, c), graphs in sorted(ds.by_size().items()):
        n = len(graphs)
        n_test = int(round(test_fraction * n))
        if n_test == 0 or n_test == n:
            raise ConfigurationError(
                f"cannot stratify {n} graph(s) of size {r}x{c} at test fraction {test_fraction}"
            )
        perm = substream(seed, "split", r, c).permutation(n)
        test_idx = set(perm[:n_test].tolist())
        for i, g in enumerate(graphs):
            (test if i in test_idx else train).append(g)
    return ds.subset(train, split="train"), ds.subset(test, split="test")


def data_dir() -> Path:
    return Path(os.environ.get("HAMLEARN_DATA_DIR", "hamlearn_data"))
