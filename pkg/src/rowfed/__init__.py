"""Sparse row-wise fusion for personalized federated multivariate regression."""
from .baselines import fedavg_fit, kkt_residuals, nonfed_fit, oracle_fit
from .datagen import ScenarioSpec, TrueModel, gen_scenario, ingest_table, split_clients
from .engine import RoundReport, ServerState, run_admm_centralized
from .evaluation import evaluate, extract_clusters, gic, grid_search, mse_est, mse_pred, rand_index
from .federation import ClientNode, ParticipationSampler, run_federated
from .fusion import FusionLayout, apply_A, apply_At, apply_AtA
from .kernels import BACKEND
from .model import (
    ClientDataset,
    CoefficientStack,
    ConfigurationError,
    DimensionError,
    GroupStructure,
    NumericalError,
    RunConfig,
    grad,
    grad_local,
    lipschitz_bound,
    loss,
)
from .penalty import PenaltySpec, penalty_value, prox_row

__version__ = "0.1.0"
