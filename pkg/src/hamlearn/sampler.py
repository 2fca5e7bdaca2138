"""Projective-measurement snapshots of a ground state and correlator estimates
from them."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ContractError
from .lattice import AdjacencySets
from .spectral import ObservableSet, StateVector

SNAPSHOT_PRESETS = (1000, 2500, 5000, 10000, 25000, 50000)

_MAGIC = b"HLSS"
_VERSION = 1
_BASIS_TAGS = {"Z": 0, "X": 1}


@dataclass(frozen=True)
class SnapshotSet:
    basis: str
    n_spins: int
    bitstrings: np.ndarray  # uint64 code words, bit i = spin i (1 means down)
    seed: int

    @property
    def n_samples(self) -> int:
        return int(self.bitstrings.size)

    def spins(self) -> np.ndarray:
        """(n_samples, n_spins) array of +-1 eigenvalues."""
        bits = (self.bitstrings[:, None] >> np.arange(self.n_spins, dtype=np.uint64)) & np.uint64(1)
        return 1 - 2 * bits.astype(np.int8)

    def to_bytes(self) -> bytes:
        """16-byte header, packed uint64 LE code words, then an 8-byte seed trailer."""
        header = struct.pack(
            "<4sBBHQ", _MAGIC, _VERSION, _BASIS_TAGS[self.basis], self.n_spins, self.n_samples
        )
        return header + self.bitstrings.astype("<u8").tobytes() + struct.pack("<q", self.seed)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SnapshotSet":
        magic, version, tag, n_spins, n_samples = struct.unpack_from("<4sBBHQ", blob, 0)
        if magic != _MAGIC or version != _VERSION:
            raise ContractError("not a snapshot file")
        words = np.frombuffer(blob, dtype="<u8", count=n_samples, offset=16).astype(np.uint64)
        (seed,) = struct.unpack_from("<q", blob, 16 + 8 * n_samples)
        basis = {v: k for k, v in _BASIS_TAGS.items()}[tag]
        return cls(basis=basis, n_spins=n_spins, bitstrings=words, seed=seed)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SnapshotSet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def rotate_to_x(psi: StateVector) -> StateVector:
    """Apply a Hadamard to every qubit (fast Walsh-Hadamard transform)."""
    n = psi.n_spins
    out = np.array(psi.amplitudes, dtype=np.float64, copy=True)
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for i in range(n):
        v = out.reshape(-1, 2, 1 << i)
        a = v[:, 0, :].copy()
        b = v[:, 1, :]
        v[:, 0, :] = (a + b) * inv_sqrt2
        v[:, 1, :] = (a - b) * inv_sqrt2
    return StateVector(n, out)


def _basis(basis: str) -> str:
    b = str(basis).upper()
    if b not in _BASIS_TAGS:
        raise ContractError(f"basis must be 'Z' or 'X', got {basis!r}")
    return b


def sample_bitstrings(psi: StateVector, basis: str, n: int, seed: int) -> SnapshotSet:
    """Draw ``n`` measurement outcomes by inverse-CDF lookup on the cumulative
    Born probabilities."""
    basis = _basis(basis)
    if n < 1:
        raise ContractError(f"need at least one sample, got {n}")
    state = rotate_to_x(psi) if basis == "X" else psi
    cdf = np.cumsum(state.probabilities)
    rng = np.random.default_rng(seed)
    u = rng.random(n) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    np.minimum(idx, cdf.size - 1, out=idx)
    return SnapshotSet(basis=basis, n_spins=psi.n_spins, bitstrings=idx.astype(np.uint64), seed=int(seed))


def _pair_means(spins: np.ndarray, edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(0)
    edges = np.asarray(edges)
    return (spins[:, edges[:, 0]].astype(np.int64) * spins[:, edges[:, 1]]).mean(axis=0)


def estimate_observables(
    snap_z: SnapshotSet,
    snap_x: Optional[SnapshotSet],
    adj: AdjacencySets,
    omega: float = float("nan"),
    delta: float = float("nan"),
) -> ObservableSet:
    """Sample means of single-spin and pair products. X-basis correlators come
    from Z-type products of the Hadamard-rotated snapshots."""
    if snap_z.basis != "Z":
        raise ContractError(f"first snapshot set must be Z-basis, got {snap_z.basis}")
    if snap_z.n_spins != adj.n_atoms:
        raise ContractError("snapshot width does not match the lattice")
    sz = snap_z.spins()
    fields = dict(
        omega=omega,
        delta=delta,
        magnetization_z=sz.mean(axis=0, dtype=np.float64),
        chi_z_nn=_pair_means(sz, adj.nn_edges),
        chi_z_nnn=_pair_means(sz, adj.nnn_edges),
    )
    if snap_x is not None and snap_x.n_samples > 0:
        if snap_x.basis != "X":
            raise ContractError(f"second snapshot set must be X-basis, got {snap_x.basis}")
        if snap_x.n_spins != snap_z.n_spins:
            raise ContractError("Z and X snapshot sets disagree on the number of spins")
        sx = snap_x.spins()
        fields["chi_x_nn"] = _pair_means(sx, adj.nn_edges)
        fields["chi_x_nnn"] = _pair_means(sx, adj.nnn_edges)
    return ObservableSet(**fields)
