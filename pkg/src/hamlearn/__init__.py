"""Ground-state data for disordered Rydberg arrays, a graph network that reads
atomic displacements off spin correlators, and brute-force checks that the
correlators determine the couplings."""
from .bijection import correlation_matrix, invert_correlators, verify_injectivity, verify_lemma
from .dataset import DatasetFile, GraphSample, ObservationMode, OmegaHistory, generate_dataset, split_dataset
from .estimator import EdgeDistanceRegressor
from .exceptions import (
    ConfigurationError,
    ContractError,
    DegeneracyError,
    DegenerateGeometryError,
    HamlearnError,
    SolverError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .lattice import AdjacencySets, CouplingMatrix, Geometry, adjacency, build_geometry, couplings
from .sampler import SnapshotSet, estimate_observables, sample_bitstrings
from .spectral import ObservableSet, StateVector, exact_observables, ground_state, staggered_order_parameter
from .training import MetricsReport, TrainConfig, run_replicates, train

__version__ = "0.1.0"
