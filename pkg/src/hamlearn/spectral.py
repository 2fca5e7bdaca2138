"""Matrix-free exact ground states of the Rydberg transverse-field Ising model

    H = sum_{i<j} J_ij Z_i Z_j + omega * sum_i X_i + delta * sum_i Z_i

and expectation values in that ground state.

Basis convention: bit ``i`` of the basis index ``b`` is the state of spin ``i``;
bit value 0 means sigma^z = +1 and bit value 1 means sigma^z = -1.
"""
from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import eigh_tridiagonal

from ._kernels import tfim_matvec, tfim_matvec_even, xx_correlators, zz_correlators
from .exceptions import ContractError, SolverError
from .lattice import C6_DEFAULT, AdjacencySets, CouplingMatrix, build_geometry, couplings

MAX_SPINS_DEFAULT = 22
# Krylov basis memory budget for one Lanczos cycle, in bytes.
_KRYLOV_BYTES = 256 * 2**20


@dataclass(frozen=True)
class StateVector:
    n_spins: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.amplitudes.shape != (2**self.n_spins,):
            raise ContractError(
                f"state of {self.n_spins} spins needs {2**self.n_spins} amplitudes, "
                f"got shape {self.amplitudes.shape}"
            )

    @property
    def probabilities(self) -> np.ndarray:
        return self.amplitudes**2

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def to_bytes(self) -> bytes:
        """8-byte little-endian length header followed by float64 LE amplitudes."""
        return struct.pack("<Q", self.amplitudes.size) + self.amplitudes.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StateVector":
        (length,) = struct.unpack_from("<Q", blob, 0)
        amps = np.frombuffer(blob, dtype="<f8", count=length, offset=8).astype(np.float64)
        n = int(length).bit_length() - 1
        if 2**n != length:
            raise ContractError(f"state length {length} is not a power of two")
        return cls(n_spins=n, amplitudes=amps)


@dataclass(frozen=True)
class ObservableSet:
    omega: float
    delta: float
    magnetization_z: np.ndarray
    chi_z_nn: np.ndarray
    chi_z_nnn: np.ndarray
    chi_x_nn: Optional[np.ndarray] = None
    chi_x_nnn: Optional[np.ndarray] = None

    @property
    def has_x(self) -> bool:
        return self.chi_x_nn is not None


@lru_cache(maxsize=8)
def spin_signs(n: int) -> np.ndarray:
    """(n, 2**n) int8 table of sigma^z eigenvalues; row i is spin i."""
    b = np.arange(2**n, dtype=np.int64)
    s = np.empty((n, 2**n), dtype=np.int8)
    for i in range(n):
        s[i] = 1 - 2 * ((b >> i) & 1)
    s.setflags(write=False)
    return s


def flip(psi: np.ndarray, site: int) -> np.ndarray:
    """sigma^x on ``site``: out[b] = psi[b ^ (1 << site)]."""
    return psi.reshape(-1, 2, 1 << site)[:, ::-1, :].reshape(-1)


def hamiltonian_diagonal(j: CouplingMatrix, delta: float) -> np.ndarray:
    """Diagonal of H in the computational basis (the ZZ and detuning terms).

    Built spin by spin: adding spin k doubles the table, shifting the old entries
    by +-(field of spins < k on spin k + delta).
    """
    jm = np.asarray(j.j_rad_per_us, dtype=np.float64)
    n = jm.shape[0]
    diag = np.zeros(1)
    for k in range(n):
        field = np.zeros(1)
        for i in range(k):
            field = np.concatenate([field + jm[k, i], field - jm[k, i]])
        field = field + delta
        diag = np.concatenate([diag + field, diag - field])
    return diag


def _check_dims(psi: np.ndarray, n: int):
    if psi.shape != (2**n,):
        raise ContractError(f"state of shape {psi.shape} does not match {n} spins")


def apply_hamiltonian(
    state, j: CouplingMatrix, omega: float, delta: float, diagonal: Optional[np.ndarray] = None
):
    """H @ psi without forming H.

    ``state`` may be a StateVector (a StateVector is returned) or a raw array.
    Pass a precomputed ``diagonal`` to skip rebuilding the ZZ table.
    """
    n = j.n_atoms
    psi = state.amplitudes if isinstance(state, StateVector) else np.asarray(state, dtype=np.float64)
    _check_dims(psi, n)
    if diagonal is None:
        diagonal = hamiltonian_diagonal(j, delta)
    out = tfim_matvec(np.ascontiguousarray(psi), diagonal, float(omega), n, np.empty_like(psi))
    if isinstance(state, StateVector):
        return StateVector(n_spins=n, amplitudes=out)
    return out


def dense_hamiltonian(j: CouplingMatrix, omega: float, delta: float) -> np.ndarray:
    """Explicit 2**n x 2**n matrix. Only meant for small n."""
    n = j.n_atoms
    h = np.diag(hamiltonian_diagonal(j, delta))
    idx = np.arange(2**n)
    for i in range(n):
        h[idx ^ (1 << i), idx] += omega
    return h


def _fix_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return -v if v[k] < 0 else v


def _classical_ground_state(diag: np.ndarray, tol: float) -> Tuple[float, np.ndarray]:
    e0 = float(diag.min())
    # equal-weight superposition over every minimising configuration
    members = np.abs(diag - e0) <= max(tol, 1e-12 * max(1.0, abs(e0)))
    v = members.astype(np.float64)
    return e0, v / np.linalg.norm(v)


def perron_start_vector(n: int, omega: float) -> np.ndarray:
    """Uniform-magnitude vector with the ground state's sign structure.

    For omega < 0 the ground state is entrywise positive; for omega > 0 it carries
    the sign (-1)**popcount(b). Starting Lanczos here keeps it inside the
    ground state's symmetry sector.
    """
    if omega > 0:
        v = np.prod(spin_signs(n), axis=0, dtype=np.float64)
    else:
        v = np.ones(2**n)
    return v / np.sqrt(2**n)


def ground_state(
    j: CouplingMatrix,
    omega: float,
    delta: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 5000,
    krylov_dim: int = 80,
    max_spins: int = MAX_SPINS_DEFAULT,
    v0: Optional[np.ndarray] = None,
    use_symmetry: bool = True,
) -> Tuple[float, StateVector]:
    """Lowest eigenpair of H by restarted Lanczos with full reorthogonalisation.

    Converged when ||H psi - E psi|| < tol. The returned state has unit norm and
    its largest-magnitude amplitude is positive.

    At zero detuning (and without ``v0``) the iteration runs in the sector that is
    even under the global spin flip, at half the dimension. With omega < 0 the
    ground state is positive and therefore even; omega > 0 is mapped onto it by
    the Z-string on all sites.
    """
    n = j.n_atoms
    if n > max_spins:
        raise ContractError(f"{n} spins exceeds the solver capacity of {max_spins}")
    if not tol > 0:
        raise ContractError("tol must be positive")
    dim = 2**n
    diag = hamiltonian_diagonal(j, delta)
    if omega == 0:
        e0, v = _classical_ground_state(diag, tol)
        return e0, StateVector(n, _fix_sign(v))
    if dim <= 4:
        h = dense_hamiltonian(j, omega, delta)
        w, vecs = np.linalg.eigh(h)
        return float(w[0]), StateVector(n, _fix_sign(vecs[:, 0]))

    if use_symmetry and delta == 0 and v0 is None:
        half = dim // 2
        d_half = np.ascontiguousarray(diag[:half])
        om = -abs(float(omega))

        def matvec(x):
            return tfim_matvec_even(x, d_half, om, n, np.empty_like(x))

        # the stored half carries 1/sqrt(2) of the full norm
        energy, x, iters, residual = _lanczos(matvec, np.ones(half), tol / np.sqrt(2.0), max_iter, krylov_dim)
        full = np.concatenate([x, x[::-1]]) / np.sqrt(2.0)
        if omega > 0:
            full *= np.prod(spin_signs(n), axis=0, dtype=np.float64)
        residual *= np.sqrt(2.0)
    else:

        def matvec(x):
            return tfim_matvec(x, diag, float(omega), n, np.empty_like(x))

        x0 = perron_start_vector(n, omega) if v0 is None else np.array(v0, dtype=np.float64)
        energy, full, iters, residual = _lanczos(matvec, x0, tol, max_iter, krylov_dim)
    if not residual < tol:
        raise SolverError(
            f"Lanczos did not reach residual {tol:g} within {max_iter} matvecs "
            f"(residual {residual:.3e}, energy {energy:.12g})",
            residual=residual,
            iterations=iters,
        )
    return energy, StateVector(n, _fix_sign(full / np.linalg.norm(full)))


def _lanczos(matvec, x0: np.ndarray, tol: float, max_iter: int, krylov_dim: int):
    """Returns (energy, unit vector, matvec count, residual norm)."""
    dim = x0.size
    m = int(min(krylov_dim, dim, max(8, _KRYLOV_BYTES // (8 * dim))))
    x = np.ascontiguousarray(x0, dtype=np.float64)
    x = x / np.linalg.norm(x)
    basis = np.empty((m, dim))
    iters = 0
    residual = np.inf
    energy = np.nan
    while iters < max_iter:
        alphas, betas = [], []
        basis[0] = x
        k_used = 0
        for k in range(m):
            w = matvec(basis[k])
            iters += 1
            alphas.append(float(basis[k] @ w))
            # two passes of classical Gram-Schmidt against the whole basis
            for _ in range(2):
                w -= basis[: k + 1].T @ (basis[: k + 1] @ w)
            beta = float(np.linalg.norm(w))
            k_used = k + 1
            theta, y = _lowest_ritz(alphas, betas)
            if beta * abs(y[-1]) < 0.1 * tol or beta < 1e-14 * max(1.0, abs(theta)):
                break
            if k + 1 == m or iters >= max_iter:
                break
            betas.append(beta)
            basis[k + 1] = w / beta
        theta, y = _lowest_ritz(alphas, betas[: k_used - 1])
        x = y @ basis[:k_used]
        x /= np.linalg.norm(x)
        hx = matvec(x)
        energy = float(x @ hx)
        residual = float(np.linalg.norm(hx - energy * x))
        if residual < tol:
            break
    return energy, x, iters, residual


def _lowest_ritz(alphas, betas):
    a = np.asarray(alphas)
    if a.size == 1:
        return float(a[0]), np.ones(1)
    w, v = eigh_tridiagonal(a, np.asarray(betas[: a.size - 1]), select="i", select_range=(0, 0))
    return float(w[0]), v[:, 0]


def zz_matrix(psi: StateVector) -> np.ndarray:
    """Full matrix of <Z_i Z_j>; the diagonal is exactly 1."""
    s = spin_signs(psi.n_spins).astype(np.float64)
    weighted = s * psi.probabilities
    zz = weighted @ s.T
    np.fill_diagonal(zz, 1.0)
    return zz


def _edges(edges) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def exact_observables(
    psi: StateVector, adj: AdjacencySets, omega: float, delta: float, with_x: bool = True
) -> ObservableSet:
    n = psi.n_spins
    if adj.n_atoms != n:
        raise ContractError(f"adjacency has {adj.n_atoms} sites but state has {n} spins")
    s = spin_signs(n)
    p = psi.probabilities
    mag = (s * p).sum(axis=1, dtype=np.float64)
    obs = dict(
        omega=float(omega),
        delta=float(delta),
        magnetization_z=mag,
        chi_z_nn=zz_correlators(p, _edges(adj.nn_edges)),
        chi_z_nnn=zz_correlators(p, _edges(adj.nnn_edges)),
    )
    if with_x:
        obs["chi_x_nn"] = xx_correlators(psi.amplitudes, _edges(adj.nn_edges))
        obs["chi_x_nnn"] = xx_correlators(psi.amplitudes, _edges(adj.nnn_edges))
    return ObservableSet(**obs)


def _stagger(rows: int, cols: int) -> np.ndarray:
    idx = np.arange(rows * cols)
    return np.where(((idx % cols) + (idx // cols)) % 2 == 0, 1.0, -1.0)


def staggered_order_parameter(psi: StateVector, rows: int, cols: int) -> float:
    """Structure-factor antiferromagnetic order parameter

        sqrt( sum_ij eps_i eps_j <Z_i Z_j> ) / N,  eps_i = (-1)**(x_i + y_i).

    Unlike the plain staggered magnetisation this stays finite in the symmetric
    ground state of a finite cluster at zero detuning.
    """
    n = rows * cols
    if psi.n_spins != n:
        raise ContractError(f"{rows}x{cols} lattice does not match {psi.n_spins} spins")
    eps = _stagger(rows, cols)
    m_st = eps @ spin_signs(n)
    return float(np.sqrt(max(psi.probabilities @ (m_st * m_st), 0.0)) / n)


def staggered_magnetization(psi: StateVector, rows: int, cols: int) -> float:
    """(1/N) sum_i (-1)**(x_i + y_i) <Z_i>; vanishes by symmetry at zero detuning."""
    n = rows * cols
    if psi.n_spins != n:
        raise ContractError(f"{rows}x{cols} lattice does not match {psi.n_spins} spins")
    mag = (spin_signs(n) * psi.probabilities).sum(axis=1, dtype=np.float64)
    return float(_stagger(rows, cols) @ mag / n)


def spectral_gap(j: CouplingMatrix, omega: float, delta: float = 0.0) -> Tuple[float, np.ndarray]:
    """(E1 - E0, ground state) by dense diagonalisation; small systems only."""
    h = dense_hamiltonian(j, omega, delta)
    w, v = np.linalg.eigh(h)
    return float(w[1] - w[0]), _fix_sign(v[:, 0])


@dataclass(frozen=True)
class PhasePoint:
    omega: float
    spacing_um: float
    order_parameter: float
    energy: float


def _phase_point(args) -> PhasePoint:
    rows, cols, omega, spacing, disorder, seed, delta, c6, tol = args
    geom = build_geometry(rows, cols, spacing, disorder, seed)
    energy, psi = ground_state(couplings(geom, c6), omega, delta, tol=tol)
    return PhasePoint(float(omega), float(spacing), staggered_order_parameter(psi, rows, cols), energy)


def phase_diagram(
    rows: int,
    cols: int,
    omegas,
    spacings,
    delta: float = 0.0,
    disorder_amplitude_um: float = 0.0,
    seed: int = 0,
    c6: float = C6_DEFAULT,
    tol: float = 1e-10,
    jobs: int = 1,
):
    """Staggered order parameter over a grid of (spacing, omega), spacing-major."""
    tasks = [
        (rows, cols, float(om), float(a), disorder_amplitude_um, seed, delta, c6, tol)
        for a in spacings
        for om in omegas
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_phase_point, tasks))
    return [_phase_point(t) for t in tasks]


def crossing(x, y, level: float = 0.5) -> float:
    """First x at which the piecewise-linear curve y(x) falls through ``level``;
    nan if it never does."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for k in range(x.size - 1):
        if y[k] >= level > y[k + 1]:
            return float(x[k] + (y[k] - level) * (x[k + 1] - x[k]) / (y[k] - y[k + 1]))
    return float("nan")
