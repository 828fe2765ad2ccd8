"""Constants used across the codebase."""

from typing import Literal

LOG_ENV = "RADGP_LOG"
ENV_PREFIX = "RADGP_"

KernelFamily = Literal["exponential", "matern", "gaussian", "generalized_cauchy"]
IndexKind = Literal["auto", "grid", "tree", "linear"]
Preconditioner = Literal["jacobi", "none"]
Layout = Literal["grid", "uniform"]
ModelKind = Literal["latent", "response"]

# Below this many points a linear scan beats building a grid.
LINEAR_SCAN_THRESHOLD = 256

DEFAULT_SEED = 20240101
DEFAULT_DIAGNOSTIC_CAP = 2000
DEFAULT_DENSE_SIMULATION_CAP = 6000
DEFAULT_CG_TOL = 1e-8
DEFAULT_CG_RETRIES = 2
DEFAULT_N_PROJECTIONS = 200
DEFAULT_PROPOSAL_SCALE = 0.1
TARGET_ACCEPTANCE = 0.24
ADAPTATION_EXPONENT = 2.0 / 3.0
PREDICTION_CACHE_SIZE = 64

# Relative eigenvalue floor used by matrix square roots.
EIGEN_CLAMP = 1e-12
SYMMETRY_TOL = 1e-8

# Simulation truth (phi chosen so that K0(0.15) = 0.05).
TRUE_PHI = 19.97
TRUE_TAU = 1.0
TRUE_SIGMA = 0.1

# Local square regions used for joint-prediction comparisons.
REGION_EDGES = ((0.15, 0.25), (0.45, 0.55), (0.75, 0.85))

CSV_FLOAT_FORMAT = "%.17g"
DRAWS_FILE = "draws.csv"
LATENT_FILE = "latent_draws.csv"
PREDICTIONS_FILE = "predictions.csv"
SUMMARY_FILE = "summary.csv"
METADATA_FILE = "metadata.yaml"
PARTITION_FILE = "partition.csv"
EDGES_FILE = "dag_edges.csv"
FACTOR_B_FILE = "factor_b.csv"
FACTOR_D_FILE = "factor_d.csv"
TRAIN_FILE = "train.csv"
TEST_FILE = "test.csv"
TRUTH_FILE = "test_truth.csv"
W2_FILE = "w2_report.csv"
SWEEP_FILE = "w2_radius_sweep.csv"
SLICED_FILE = "sliced_w2.csv"
PREDICTION_METRICS_FILE = "prediction_metrics.csv"
