"""Rank-1 Bayesian neural networks on a small numpy autodiff engine."""

from rank1bnn.autodiff import Tensor, backward, grad, no_grad
from rank1bnn.distributions import MixtureDistribution, ScaleDistribution, kl_divergence, kl_mixture
from rank1bnn.layers import Rank1Conv2D, Rank1Dense, Rank1LSTMCell, Rank1MLP
from rank1bnn.objectives import ElboConfig, LikelihoodMode, elbo_loss, nll
from rank1bnn.trainer import TrainConfig, Trainer, build_model, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad", "no_grad",
    "MixtureDistribution", "ScaleDistribution", "kl_divergence", "kl_mixture",
    "Rank1Conv2D", "Rank1Dense", "Rank1LSTMCell", "Rank1MLP",
    "ElboConfig", "LikelihoodMode", "elbo_loss", "nll",
    "TrainConfig", "Trainer", "build_model", "train",
]
