"""Disordered rectangular Rydberg arrays: positions, van der Waals couplings and
nominal-lattice adjacency.

Atom ``i`` sits at row ``i // cols`` and column ``i % cols``; its integer lattice
coordinates are ``(x, y) = (i % cols, i // cols)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from ._rng import substream
from .exceptions import ConfigurationError, DegenerateGeometryError

#: C6 / hbar for Rb with n = 70, in rad/us * um^6.
C6_DEFAULT = 5.42e6
SPACING_DEFAULT_UM = 10.0
DISORDER_DEFAULT_UM = 0.1


@dataclass(frozen=True)
class Geometry:
    rows: int
    cols: int
    nominal_spacing_um: float
    disorder_amplitude_um: float
    seed: int
    positions_um: np.ndarray = field(repr=False)

    @property
    def n_atoms(self) -> int:
        return self.rows * self.cols

    def lattice_coords(self) -> np.ndarray:
        idx = np.arange(self.n_atoms)
        return np.stack([idx % self.cols, idx // self.cols], axis=1)

    def nominal_positions(self) -> np.ndarray:
        return self.lattice_coords().astype(float) * self.nominal_spacing_um

    def distances(self) -> np.ndarray:
        diff = self.positions_um[:, None, :] - self.positions_um[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "spacing_um": self.nominal_spacing_um,
            "disorder_amplitude_um": self.disorder_amplitude_um,
            "seed": self.seed,
            # repr() of a float round-trips exactly
            "positions": [[float(x), float(y)] for x, y in self.positions_um],
        }

    @classmethod
    def from_json(cls, record: dict) -> "Geometry":
        return cls(
            rows=int(record["rows"]),
            cols=int(record["cols"]),
            nominal_spacing_um=float(record["spacing_um"]),
            disorder_amplitude_um=float(record.get("disorder_amplitude_um", 0.0)),
            seed=int(record["seed"]),
            positions_um=np.asarray(record["positions"], dtype=np.float64).reshape(-1, 2),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass(frozen=True)
class CouplingMatrix:
    j_rad_per_us: np.ndarray
    c6: float = C6_DEFAULT

    @property
    def n_atoms(self) -> int:
        return self.j_rad_per_us.shape[0]

    @classmethod
    def from_array(cls, j, c6: float = C6_DEFAULT) -> "CouplingMatrix":
        j = np.asarray(j, dtype=np.float64)
        if j.ndim != 2 or j.shape[0] != j.shape[1]:
            raise ConfigurationError(f"coupling matrix must be square, got shape {j.shape}")
        if not np.allclose(j, j.T, rtol=0, atol=0):
            raise ConfigurationError("coupling matrix must be symmetric")
        if np.any(np.diag(j) != 0):
            raise ConfigurationError("coupling matrix must have a zero diagonal")
        return cls(j_rad_per_us=j, c6=c6)


@dataclass(frozen=True)
class AdjacencySets:
    rows: int
    cols: int
    nn_edges: np.ndarray
    nnn_edges: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.rows * self.cols


def build_geometry(
    rows: int,
    cols: int,
    spacing_um: float = SPACING_DEFAULT_UM,
    disorder_amplitude_um: float = DISORDER_DEFAULT_UM,
    seed: int = 0,
) -> Geometry:
    """Place ``rows x cols`` atoms on a square grid and jitter each coordinate.

    Every atom draws its (dx, dy) offset from its own substream of ``seed``, each
    component uniform in ``[-disorder_amplitude_um, disorder_amplitude_um]``.
    """
    if int(rows) != rows or int(cols) != cols or rows < 1 or cols < 1:
        raise ConfigurationError(f"rows and cols must be positive integers, got {rows}x{cols}")
    if not spacing_um > 0:
        raise ConfigurationError(f"spacing must be positive, got {spacing_um}")
    if not 0 <= disorder_amplitude_um < spacing_um / 2:
        raise ConfigurationError(
            f"disorder amplitude must lie in [0, spacing/2), got {disorder_amplitude_um}"
        )
    rows, cols = int(rows), int(cols)
    n = rows * cols
    idx = np.arange(n)
    nominal = np.stack([idx % cols, idx // cols], axis=1).astype(np.float64) * spacing_um
    offsets = np.zeros((n, 2))
    if disorder_amplitude_um > 0:
        for i in range(n):
            offsets[i] = substream(seed, "atom", i).uniform(
                -disorder_amplitude_um, disorder_amplitude_um, size=2
            )
    return Geometry(
        rows=rows,
        cols=cols,
        nominal_spacing_um=float(spacing_um),
        disorder_amplitude_um=float(disorder_amplitude_um),
        seed=int(seed),
        positions_um=nominal + offsets,
    )


def couplings(geom: Geometry, c6: float = C6_DEFAULT) -> CouplingMatrix:
    """J_ij = c6 / R_ij**6 for every pair of atoms."""
    if not c6 > 0:
        raise ConfigurationError(f"c6 must be positive, got {c6}")
    r = geom.distances()
    off = ~np.eye(geom.n_atoms, dtype=bool)
    if np.any(r[off] == 0):
        i, j = np.argwhere((r == 0) & off)[0]
        raise DegenerateGeometryError(f"atoms {i} and {j} coincide")
    j = np.zeros_like(r)
    j[off] = c6 / r[off] ** 6
    return CouplingMatrix(j_rad_per_us=j, c6=float(c6))


def adjacency(rows: int, cols: int) -> AdjacencySets:
    """NN and NNN (plaquette diagonal) edges of the nominal lattice, as (i, j) with i < j."""
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"rows and cols must be positive, got {rows}x{cols}")
    nn: List[Tuple[int, int]] = []
    nnn: List[Tuple[int, int]] = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                nn.append((i, i + 1))
            if r + 1 < rows:
                nn.append((i, i + cols))
            if r + 1 < rows and c + 1 < cols:
                nnn.append((i, i + cols + 1))
            if r + 1 < rows and c >= 1:
                nnn.append((i, i + cols - 1))
    nn_arr = np.array(sorted(nn), dtype=np.int64).reshape(-1, 2)
    nnn_arr = np.array(sorted(nnn), dtype=np.int64).reshape(-1, 2)
    return AdjacencySets(rows=rows, cols=cols, nn_edges=nn_arr, nnn_edges=nnn_arr)


def edge_displacements(geom: Geometry, edges: np.ndarray, nominal_length: float) -> np.ndarray:
    """Actual minus nominal length of each edge, in um."""
    edges = np.asarray(edges).reshape(-1, 2)
    d = geom.positions_um[edges[:, 0]] - geom.positions_um[edges[:, 1]]
    return np.sqrt((d**2).sum(axis=1)) - nominal_length
