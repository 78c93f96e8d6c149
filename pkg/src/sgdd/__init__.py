"""Split Gibbs sampling with discrete diffusion priors for posterior inference on token sequences."""

from .diffusion import TabularPrior, concrete_score, reverse_euler_sample
from .splitgibbs import SGDD, GibbsConfig, LikelihoodPotential, run_sgdd
from .statespace import AnnealingSchedule, NoiseSchedule, StateSpace, make_rng

__version__ = "0.1.0"

__all__ = [
    "AnnealingSchedule",
    "GibbsConfig",
    "LikelihoodPotential",
    "NoiseSchedule",
    "SGDD",
    "StateSpace",
    "TabularPrior",
    "concrete_score",
    "make_rng",
    "reverse_euler_sample",
    "run_sgdd",
]
