"""Planning with lazily estimated mixture transition models, RTDP over sampled
states and Gaussian-process action selection."""

from .benchmarks import PushDomain, ToyDomain, evaluate_policy, generate_dataset
from .density import GaussianMixture, LocalDensityModel, fit_gmm_em, select_k_bic
from .domain import ActionSpace, Dataset, RewardSpec, WorldMap, load_world
from .planner import Policy, Problem, SelectorConfig, boidp, compute_h_u, rtdp

__version__ = "0.1.0"

__all__ = [
    "ActionSpace", "Dataset", "GaussianMixture", "LocalDensityModel", "Policy", "Problem",
    "PushDomain", "RewardSpec", "SelectorConfig", "ToyDomain", "WorldMap", "boidp",
    "compute_h_u", "evaluate_policy", "fit_gmm_em", "generate_dataset", "load_world", "rtdp",
    "select_k_bic",
]
