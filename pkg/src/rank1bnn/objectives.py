"""Likelihood formulations for ensembles of weight samples, and the ELBO.

``logits`` are laid out ``[M, B, C]``: M weight samples (mixture components,
or components times evaluation samples), B examples, C classes. The four
likelihoods:

* ``marginal_logits``: cross-entropy of the softmax of averaged logits.
* ``marginal_probs``: -log of the averaged softmax probabilities.
* ``average``: mean over samples of per-sample cross-entropy (Gibbs).
* ``mixture``: -logsumexp_m log p(y | x, theta_m) + log M.

For categorical outputs ``marginal_probs`` and ``mixture`` are the same
number; ``mixture`` stays finite where the direct form underflows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from rank1bnn import autodiff as ad
from rank1bnn.autodiff import Tensor


class LikelihoodMode(str, enum.Enum):
    MARGINAL_LOGITS = "marginal_logits"
    MARGINAL_PROBS = "marginal_probs"
    AVERAGE = "average"
    MIXTURE = "mixture"


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(np.intp)] = 1.0
    return out


def true_class_log_probs(logits: Tensor, labels) -> Tensor:
    """log softmax(logits)[..., y] with shape ``logits.shape[:-1]``."""
    logits = ad.as_tensor(logits)
    onehot = _one_hot(labels, logits.shape[-1])
    return ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis=-1), onehot), axis=-1)


def nll(mode, logits: Tensor, labels) -> Tensor:
    """Per-example negative log-likelihood, averaged over the batch."""
    mode = LikelihoodMode(mode)
    logits = ad.as_tensor(logits)
    if logits.ndim != 3:
        raise ad.ShapeError(f"logits must be [M, B, C], got {logits.shape}")
    m, b, c = logits.shape
    if c < 2:
        raise ValueError("need at least two classes")
    if len(labels) != b:
        raise ValueError(f"{len(labels)} labels for a batch of {b}")
    onehot = _one_hot(labels, c)
    if mode is LikelihoodMode.MARGINAL_LOGITS:
        lp = ad.log_softmax(ad.reduce_mean(logits, axis=0), axis=-1)
        return ad.neg(ad.reduce_mean(ad.reduce_sum(ad.mul(lp, onehot), axis=-1)))
    if mode is LikelihoodMode.MARGINAL_PROBS:
        probs = ad.reduce_mean(ad.softmax(logits, axis=-1), axis=0)
        p_true = ad.reduce_sum(ad.mul(probs, onehot), axis=-1)
        return ad.neg(ad.reduce_mean(ad.log(p_true)))
    lp_true = ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis=-1), onehot), axis=-1)  # [M, B]
    if mode is LikelihoodMode.AVERAGE:
        return ad.neg(ad.reduce_mean(lp_true))
    per_example = ad.sub(ad.logsumexp(lp_true, axis=0), math.log(m))
    return ad.neg(ad.reduce_mean(per_example))


def anneal(epoch: float, kl_annealing_epochs: float) -> float:
    """Linear KL warm-up: min(1, epoch / kl_annealing_epochs)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if kl_annealing_epochs <= 0:
        raise ValueError("kl_annealing_epochs must be positive")
    return min(1.0, epoch / kl_annealing_epochs)


@dataclass
class ElboConfig:
    train_set_size: int
    batch_size: int
    l2: float = 0.0
    kl_annealing_epochs: float = 1.0
    likelihood_mode: LikelihoodMode = LikelihoodMode.AVERAGE

    def __post_init__(self):
        self.likelihood_mode = LikelihoodMode(self.likelihood_mode)
        if not self.train_set_size >= self.batch_size >= 1:
            raise ValueError("need train_set_size >= batch_size >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.kl_annealing_epochs <= 0:
            raise ValueError("kl_annealing_epochs must be positive")


def l2_penalty(kernels) -> Tensor:
    total = Tensor(0.0)
    for w in kernels:
        total = ad.add(total, ad.reduce_sum(ad.square(w)))
    return total


def split_components(logits: Tensor, ensemble_size: int) -> Tensor:
    """[K*B, C] rows in component blocks -> [K, B, C]."""
    n, c = logits.shape
    if n % ensemble_size:
        raise ValueError(f"{n} rows not divisible by ensemble size {ensemble_size}")
    return ad.reshape(logits, (ensemble_size, n // ensemble_size, c))


def elbo_loss(model, batch, epoch: float, config: ElboConfig, rng, per_example: bool = True) -> Tensor:
    """Negative ELBO per training example.

    ``batch`` is ``(x, y)`` already duplicated K times. The returned value is

        nll + anneal(epoch) * KL / N + l2 * sum ||W||^2

    i.e. the minibatch objective with likelihood scaled by N/B, divided
    through by N so that learning rates and l2 coefficients keep their
    usual per-example meaning. Biases carry no penalty.
    """
    x, y = batch
    k = model.ensemble_size
    y = np.asarray(y)
    logits = split_components(model.forward(x, "sample", rng, per_example), k)
    labels = y.reshape(k, -1)
    if np.any(labels != labels[0]):
        raise ValueError("labels are not duplicated consistently across components")
    loss = nll(config.likelihood_mode, logits, labels[0])
    weight = anneal(epoch, config.kl_annealing_epochs)
    if weight:
        loss = ad.add(loss, ad.mul(model.kl(), weight / config.train_set_size))
    if config.l2:
        loss = ad.add(loss, ad.mul(l2_penalty(model.kernel_tensors()), config.l2))
    return loss
