"""Multinomial probit regression with Bayesian sums of trees.

Latent utilities follow a multivariate normal centered on per-category
sums-of-trees; observed categories are the argmax (or a reference level when
every utility is negative). Three Gibbs samplers (kd, p1, p2) differ in how
they handle the trace identifiability constraint on the latent covariance.
"""

from .data import Dataset, decode_outcomes, encode_outcomes
from .predict import (
    accuracy_agreement,
    accuracy_mode,
    posterior_predict,
    predict_draw,
)
from .sampler import (
    ALGORITHMS,
    ChainConfig,
    MPBartSampler,
    NumericalError,
    PosteriorDraws,
    run_chain,
)
from .simgen import SimSpec, bivariate_normal_cdf, generate, simulated_dataset

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "ChainConfig",
    "Dataset",
    "MPBartSampler",
    "NumericalError",
    "PosteriorDraws",
    "SimSpec",
    "accuracy_agreement",
    "accuracy_mode",
    "bivariate_normal_cdf",
    "decode_outcomes",
    "encode_outcomes",
    "generate",
    "posterior_predict",
    "predict_draw",
    "run_chain",
    "simulated_dataset",
    "__version__",
]
