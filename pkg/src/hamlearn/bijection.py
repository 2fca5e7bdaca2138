"""Brute-force checks that ground-state ZZ correlations determine the couplings,
and a solver that recovers the couplings from the correlations.

Conventions: ``c[i, j] = <S^z_i S^z_j> = <Z_i Z_j> / 4`` with hbar = 1, so the
diagonal is exactly 1/4. Correlations are the plain (not connected) ones.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigurationError, ContractError, DegeneracyError, SolverError
from .lattice import C6_DEFAULT, SPACING_DEFAULT_UM, CouplingMatrix
from .spectral import StateVector, _classical_ground_state, dense_hamiltonian, hamiltonian_diagonal, spin_signs, zz_matrix

logger = logging.getLogger(__name__)

MAX_DENSE_SPINS = 12
J_UNIFORM_RANGE = (0.1, 10.0)
# spread of atom positions (um) that defines the physical coupling range
PHYSICAL_DISORDER_UM = 0.1
SYMMETRIC_SECTOR_NOTE = (
    "at zero transverse field the ground space is spanned by the minimum-energy "
    "classical configurations; the reported state is their equal-weight superposition"
)

Topology = Union[str, Tuple[int, int], int]


class NonConvergenceError(SolverError):
    """Correlator inversion hit its iteration cap or stopped making progress."""

    def __init__(self, message, residual=None, iterations=None, couplings=None):
        super().__init__(message, residual=residual, iterations=iterations)
        self.couplings = couplings


def parse_topology(topology: Topology, n_spins: Optional[int] = None) -> Tuple[int, int]:
    """``"chain"`` (needs ``n_spins``), ``"RxC"``, ``(R, C)`` or a spin count (chain)."""
    if topology is None or topology == "chain":
        if n_spins is None:
            raise ConfigurationError("a chain topology needs n_spins")
        shape = (1, int(n_spins))
    elif isinstance(topology, (int, np.integer)):
        shape = (1, int(topology))
    elif isinstance(topology, str):
        try:
            r, c = (int(t) for t in topology.lower().split("x"))
        except ValueError:
            raise ConfigurationError(f"cannot parse topology {topology!r}") from None
        shape = (r, c)
    else:
        shape = tuple(int(t) for t in topology)
    if len(shape) != 2 or min(shape) < 1:
        raise ConfigurationError(f"bad topology {topology!r}")
    if n_spins is not None and shape[0] * shape[1] != n_spins:
        raise ConfigurationError(f"topology {shape} does not hold {n_spins} spins")
    return shape


def _nominal_distances(rows: int, cols: int, spacing_um: float) -> np.ndarray:
    idx = np.arange(rows * cols)
    xy = np.stack([idx % cols, idx // cols], axis=1) * spacing_um
    return np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)


def random_couplings(
    rng: np.random.Generator,
    n_spins: Optional[int] = None,
    topology: Topology = "chain",
    sampling: str = "physical",
    spacing_um: float = SPACING_DEFAULT_UM,
    disorder_um: float = PHYSICAL_DISORDER_UM,
    c6: float = C6_DEFAULT,
) -> CouplingMatrix:
    """Random all-to-all positive couplings.

    ``physical``: each J_ij uniform in the range C6/R**6 spans when both atoms
    move by up to ``disorder_um`` around their lattice sites.
    ``uniform``: each J_ij uniform in ``J_UNIFORM_RANGE`` (rad/us).
    """
    rows, cols = parse_topology(topology, n_spins)
    n = rows * cols
    iu = np.triu_indices(n, 1)
    if sampling == "physical":
        r0 = _nominal_distances(rows, cols, spacing_um)[iu]
        lo, hi = c6 / (r0 + 2 * disorder_um) ** 6, c6 / (r0 - 2 * disorder_um) ** 6
        vals = rng.uniform(lo, hi)
    elif sampling == "uniform":
        vals = rng.uniform(*J_UNIFORM_RANGE, size=iu[0].size)
    else:
        raise ConfigurationError(f"unknown coupling sampling {sampling!r}")
    j = np.zeros((n, n))
    j[iu] = vals
    return CouplingMatrix.from_array(j + j.T, c6=c6)


def _as_coupling(j) -> CouplingMatrix:
    return j if isinstance(j, CouplingMatrix) else CouplingMatrix.from_array(j)


def dense_spectrum(j: CouplingMatrix, omega: float, delta: float = 0.0):
    """(energies, ground state vector, gap) from full diagonalisation."""
    if j.n_atoms > MAX_DENSE_SPINS:
        raise ConfigurationError(f"dense diagonalisation limited to {MAX_DENSE_SPINS} spins")
    w, v = np.linalg.eigh(dense_hamiltonian(j, omega, delta))
    psi = v[:, 0]
    psi = -psi if psi[np.argmax(np.abs(psi))] < 0 else psi
    gap = float(w[1] - w[0]) if w.size > 1 else float("inf")
    return w, psi, gap


def correlation_matrix(
    j,
    omega: float,
    delta: float = 0.0,
    gap_tol: float = 1e-10,
    symmetric_sector: bool = False,
) -> np.ndarray:
    """Matrix of <S^z_i S^z_j> in the ground state.

    A ground-state gap below ``gap_tol`` raises :class:`DegeneracyError`,
    unless ``symmetric_sector`` is set at zero transverse field, where the
    equal-weight superposition of the classical minimisers is used instead.
    """
    j = _as_coupling(j)
    n = j.n_atoms
    if omega == 0:
        diag = hamiltonian_diagonal(j, delta)
        e_sorted = np.unique(diag)
        _, psi = _classical_ground_state(diag, tol=gap_tol)
        degenerate = int(np.count_nonzero(psi)) > 1
        if degenerate and not symmetric_sector:
            raise DegeneracyError("zero transverse field: classical ground state is degenerate")
        if not degenerate and e_sorted.size > 1 and e_sorted[1] - e_sorted[0] < gap_tol:
            raise DegeneracyError("ground state gap below tolerance")
    else:
        _, psi, gap = dense_spectrum(j, omega, delta)
        if gap < gap_tol:
            raise DegeneracyError(f"ground state gap {gap:.3e} below tolerance {gap_tol:.1e}")
    return zz_matrix(StateVector(n, psi)) / 4.0


def _upper(m: np.ndarray) -> np.ndarray:
    return m[np.triu_indices(m.shape[0], 1)]


def same_psi_residual(j1, j2, omega: float, delta: float = 0.0) -> float:
    """Largest deviation from the identity two Hamiltonians sharing a ground
    state must satisfy in every configuration s:

        sum_{i<j} (J1 - J2)_ij s_i s_j - (E1 - E2) = 0.

    (Both act identically through the field terms, so the difference of the
    eigenvalue equations is diagonal.)
    """
    j1, j2 = _as_coupling(j1), _as_coupling(j2)
    if j1.n_atoms != j2.n_atoms:
        raise ContractError("coupling matrices disagree in size")
    w1, _, _ = dense_spectrum(j1, omega, delta)
    w2, _, _ = dense_spectrum(j2, omega, delta)
    dj = CouplingMatrix.from_array(j1.j_rad_per_us - j2.j_rad_per_us)
    lhs = hamiltonian_diagonal(dj, 0.0)
    return float(np.max(np.abs(lhs - (w1[0] - w2[0]))))


@dataclass
class LemmaStats:
    n_spins: int
    trials: int
    omega: float
    delta: float
    gaps: List[float]
    min_amplitudes: List[float]
    gap_threshold: float = 1e-10
    amplitude_threshold: float = 1e-12

    @property
    def min_gap(self) -> float:
        return float(min(self.gaps)) if self.gaps else float("nan")

    @property
    def min_amplitude(self) -> float:
        return float(min(self.min_amplitudes)) if self.min_amplitudes else float("nan")

    @property
    def n_failures(self) -> int:
        return sum(
            1 for g, a in zip(self.gaps, self.min_amplitudes) if not (g > self.gap_threshold and a > self.amplitude_threshold)
        )

    @property
    def holds(self) -> bool:
        return self.n_failures == 0

    def to_json(self) -> dict:
        return {
            "n_spins": self.n_spins,
            "trials": self.trials,
            "omega": self.omega,
            "delta": self.delta,
            "min_gap": self.min_gap,
            "min_amplitude": self.min_amplitude,
            "gap_threshold": self.gap_threshold,
            "amplitude_threshold": self.amplitude_threshold,
            "failures": self.n_failures,
            "holds": self.holds,
        }


def verify_lemma(
    n_spins: int,
    trials: int,
    omega: float,
    delta: float = 0.0,
    rng=None,
    topology: Topology = "chain",
    sampling: str = "physical",
    couplings: Optional[Sequence] = None,
) -> LemmaStats:
    """Spectral gap and smallest |amplitude| of the ground state for random
    instances (or the given ``couplings``). At zero field the hypothesis fails
    and the statistics show it; nothing is raised."""
    if n_spins > 10:
        raise ConfigurationError("lemma checks are limited to 10 spins")
    rng = np.random.default_rng(rng)
    if couplings is None:
        couplings = [random_couplings(rng, n_spins, topology, sampling) for _ in range(trials)]
    gaps, amps = [], []
    for j in couplings:
        j = _as_coupling(j)
        if j.n_atoms != n_spins:
            raise ContractError("coupling matrix size does not match n_spins")
        w, psi, gap = dense_spectrum(j, omega, delta)
        gaps.append(gap)
        amps.append(float(np.abs(psi).min()))
    return LemmaStats(n_spins=n_spins, trials=len(gaps), omega=float(omega), delta=float(delta), gaps=gaps, min_amplitudes=amps)


def omega_zero_counterexample(topology: Topology = "2x2", spacing_um: float = SPACING_DEFAULT_UM, c6: float = C6_DEFAULT) -> dict:
    """Two antiferromagnetic coupling sets, J2 = 2 J1, with identical ground
    state correlations at zero transverse field and detuning."""
    rows, cols = parse_topology(topology)
    r = _nominal_distances(rows, cols, spacing_um)
    with np.errstate(divide="ignore"):
        j1 = np.where(r > 0, c6 / np.where(r > 0, r, 1.0) ** 6, 0.0)
    j1, j2 = CouplingMatrix.from_array(j1, c6), CouplingMatrix.from_array(2 * j1, c6)
    c1 = correlation_matrix(j1, 0.0, 0.0, symmetric_sector=True)
    c2 = correlation_matrix(j2, 0.0, 0.0, symmetric_sector=True)
    degeneracy = int(np.count_nonzero(_classical_ground_state(hamiltonian_diagonal(j1, 0.0), 1e-10)[1]))
    return {
        "topology": f"{rows}x{cols}",
        "omega": 0.0,
        "delta": 0.0,
        "j_distance": float(np.max(np.abs(j1.j_rad_per_us - j2.j_rad_per_us))),
        "c_distance": float(np.max(np.abs(c1 - c2))),
        "ground_state_degeneracy": degeneracy,
        "convention": SYMMETRIC_SECTOR_NOTE,
        "injective": bool(np.max(np.abs(c1 - c2)) > 0),
    }


@dataclass
class BijectionReport:
    n_spins: int
    topology: str
    omega: float
    delta: float
    trials: int
    sampling: str
    j_tol: float
    c_floor: float
    min_pairwise_c_distance: float
    n_compared: int
    n_skipped: int
    violations: List[dict] = field(default_factory=list)
    lemma: Optional[dict] = None
    counterexample: Optional[dict] = None

    @property
    def n_violations(self) -> int:
        return len(self.violations)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["n_violations"] = self.n_violations
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def summary_table(self) -> str:
        rows = [
            ("spins", f"{self.n_spins} ({self.topology})"),
            ("omega [rad/us]", f"{self.omega:g}"),
            ("delta [rad/us]", f"{self.delta:g}"),
            ("pairs compared", f"{self.n_compared}"),
            ("pairs skipped", f"{self.n_skipped}"),
            ("min c distance", f"{self.min_pairwise_c_distance:.3e}"),
            ("thresholds (J, c)", f"{self.j_tol:g}, {self.c_floor:g}"),
            ("violations", f"{self.n_violations}"),
        ]
        if self.lemma:
            rows += [("min gap", f"{self.lemma['min_gap']:.3e}"), ("min |amplitude|", f"{self.lemma['min_amplitude']:.3e}")]
        if self.counterexample:
            rows.append(("omega=0 c distance", f"{self.counterexample['c_distance']:.3e}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def verify_injectivity(
    n_spins: int,
    topology: Topology = "chain",
    trials: int = 100,
    omega: float = 1.0,
    delta: float = 0.0,
    rng=None,
    sampling: str = "physical",
    j_tol: float = 1e-3,
    c_floor: float = 1e-8,
    with_lemma: bool = True,
) -> BijectionReport:
    """Compare the correlation matrices of ``trials`` pairs of random coupling
    matrices. A pair further apart than ``j_tol`` in J but within ``c_floor``
    in c is a violation; for each one the shared-ground-state identity is
    evaluated over all configurations and recorded."""
    if omega == 0:
        raise ConfigurationError(
            "injectivity needs a nonzero transverse field: at zero field the ground state "
            "is classical and ignores the coupling magnitudes"
        )
    if n_spins > 10:
        raise ConfigurationError("injectivity checks are limited to 10 spins")
    if trials < 1:
        raise ConfigurationError("need at least one trial")
    rows, cols = parse_topology(topology, n_spins)
    rng = np.random.default_rng(rng)
    min_c = float("inf")
    compared = skipped = 0
    violations = []
    gaps, amps = [], []
    for t in range(trials):
        j1 = random_couplings(rng, n_spins, (rows, cols), sampling)
        j2 = random_couplings(rng, n_spins, (rows, cols), sampling)
        dj = float(np.max(np.abs(j1.j_rad_per_us - j2.j_rad_per_us)))
        if dj <= j_tol:
            skipped += 1
            continue
        spectra = [dense_spectrum(j, omega, delta) for j in (j1, j2)]
        for _, psi, gap in spectra:
            gaps.append(gap)
            amps.append(float(np.abs(psi).min()))
        c1, c2 = (zz_matrix(StateVector(n_spins, psi)) / 4.0 for _, psi, _ in spectra)
        dc = float(np.max(np.abs(c1 - c2)))
        compared += 1
        min_c = min(min_c, dc)
        if dc <= c_floor:
            violations.append(
                {
                    "trial": t,
                    "j_distance": dj,
                    "c_distance": dc,
                    "constraint_residual": same_psi_residual(j1, j2, omega, delta),
                    "j1": _upper(j1.j_rad_per_us).tolist(),
                    "j2": _upper(j2.j_rad_per_us).tolist(),
                }
            )
    lemma = None
    if with_lemma and gaps:
        lemma = LemmaStats(n_spins, len(gaps), float(omega), float(delta), gaps, amps).to_json()
    return BijectionReport(
        n_spins=n_spins,
        topology=f"{rows}x{cols}",
        omega=float(omega),
        delta=float(delta),
        trials=trials,
        sampling=sampling,
        j_tol=j_tol,
        c_floor=c_floor,
        min_pairwise_c_distance=min_c if compared else float("nan"),
        n_compared=compared,
        n_skipped=skipped,
        violations=violations,
        lemma=lemma,
        counterexample=omega_zero_counterexample(),
    )


@dataclass
class InversionResult:
    couplings: CouplingMatrix
    residual: float
    iterations: int
    history: List[float]

    def to_json(self) -> dict:
        return {
            "j_rad_per_us": self.couplings.j_rad_per_us.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "objective_history": self.history,
        }


def invert_correlators(
    c_target,
    omega: float,
    delta: float = 0.0,
    j_init=None,
    tol: float = 1e-12,
    max_iter: int = 200,
    damping: float = 1e-3,
    fd_step: float = 1e-6,
) -> InversionResult:
    """Couplings whose ground state reproduces ``c_target``.

    Damped Gauss-Newton (Levenberg-Marquardt) on the off-diagonal entries of
    c, with a central-difference Jacobian of step ``fd_step`` times the
    coupling scale. Steps that raise the objective are rejected and the
    damping increased, so the objective never goes up. Each step is capped at
    half the largest coupling, which keeps a saturated direction from
    throwing the iterate far from the physical range. Iterates may leave the
    positive orthant on the way (a hard wall there creates spurious stationary
    points where a weak coupling is pinned at zero); the converged couplings
    must be positive. Converged once ``||c(J) - c_target||^2`` drops below
    ``tol**2``.
    """
    if omega == 0:
        raise ConfigurationError("inversion needs a nonzero transverse field; at zero field c does not determine J")
    c_target = np.asarray(c_target, dtype=np.float64)
    if c_target.ndim != 2 or c_target.shape[0] != c_target.shape[1]:
        raise ContractError("target must be a square correlation matrix")
    n = c_target.shape[0]
    if n > 8:
        raise ConfigurationError("inversion is limited to 8 spins")
    if not np.allclose(c_target, c_target.T, atol=1e-12) or not np.allclose(np.diag(c_target), 0.25, atol=1e-12):
        raise ContractError("target is not a <S^z S^z> matrix (needs symmetry and a diagonal of 1/4)")
    iu = np.triu_indices(n, 1)
    target = c_target[iu]

    if j_init is None:
        theta = np.ones(iu[0].size)
    else:
        j_init = _as_coupling(j_init)
        if j_init.n_atoms != n:
            raise ContractError("initial couplings do not match the target size")
        theta = j_init.j_rad_per_us[iu].copy()
        if np.any(theta <= 0):
            raise ContractError("initial couplings must be strictly positive")

    def unpack(th):
        j = np.zeros((n, n))
        j[iu] = th
        return CouplingMatrix.from_array(j + j.T)

    def resid(th):
        return correlation_matrix(unpack(th), omega, delta, gap_tol=0.0)[iu] - target

    r = resid(theta)
    obj = float(r @ r)
    history = [obj]
    lam = damping
    it = 0
    while obj >= tol**2:
        if it >= max_iter:
            raise NonConvergenceError(
                f"inversion did not converge in {max_iter} iterations (residual {np.sqrt(obj):.3e})",
                residual=float(np.sqrt(obj)),
                iterations=it,
                couplings=unpack(theta),
            )
        it += 1
        h = fd_step * max(float(np.max(np.abs(theta))), 1e-3)
        jac = np.empty((r.size, theta.size))
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = h
            jac[:, k] = (resid(theta + e) - resid(theta - e)) / (2 * h)
        jtj, g = jac.T @ jac, jac.T @ r
        scale = np.diag(jtj).copy()
        scale[scale == 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                # trust region: no coupling moves by more than half the current scale
                cap = 0.5 * max(float(np.max(np.abs(theta))), 1e-3)
                big = float(np.max(np.abs(step)))
                if big > cap:
                    step = step * (cap / big)
                trial = theta + step
                r_new = resid(trial)
                obj_new = float(r_new @ r_new)
                if obj_new < obj:
                    theta, r, obj = trial, r_new, obj_new
                    lam = max(lam / 3.0, 1e-12)
                    break
            lam *= 4.0
            if lam > 1e12:
                raise NonConvergenceError(
                    f"inversion stalled (residual {np.sqrt(obj):.3e})", residual=float(np.sqrt(obj)), iterations=it,
                    couplings=unpack(theta),
                )
        history.append(obj)
        logger.debug("inversion iteration %d objective %.3e", it, obj)
    if np.any(theta <= 0):
        raise NonConvergenceError(
            "inversion converged to non-positive couplings; target is not representable by positive J",
            residual=float(np.sqrt(obj)),
            iterations=it,
            couplings=unpack(theta),
        )
    return InversionResult(couplings=unpack(theta), residual=float(np.sqrt(obj)), iterations=it, history=history)
