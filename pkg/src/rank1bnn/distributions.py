"""Priors and variational posteriors over rank-1 factor vectors.

Scales are stored unconstrained and mapped through softplus, so gradient
steps can never produce a non-positive scale. Mixtures have fixed uniform
weights; which component a row of the batch belongs to is decided by the
caller (block structure of the duplicated batch), never sampled here.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Union

import numpy as np

from rank1bnn import autodiff as ad
from rank1bnn.autodiff import Tensor

GAUSSIAN = "gaussian"
CAUCHY = "cauchy"
LOG_GAUSSIAN = "log_gaussian"
POINT = "point"
FAMILIES = (GAUSSIAN, CAUCHY, LOG_GAUSSIAN, POINT)

# Cauchy inverse-CDF noise is drawn from [eps, 1 - eps] to bound tail samples.
CAUCHY_CLAMP = 1e-7


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus only produces positive values")
    return y + np.log(-np.expm1(-y))


def dropout_to_stddev(p: float) -> float:
    """Standard deviation implied by a dropout rate: sqrt(p / (1 - p)).

    Dropout's Bernoulli noise (0 w.p. ``p``, else 1/(1-p)) has mean 1 and this
    standard deviation, which is why it serves as a scale initializer.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    return math.sqrt(p / (1.0 - p))


def _check_family(family: str) -> str:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return family


def _noise(family: str, shape, rng: np.random.Generator) -> np.ndarray:
    if family in (GAUSSIAN, LOG_GAUSSIAN):
        return rng.standard_normal(shape)
    if family == CAUCHY:
        u = np.clip(rng.uniform(size=shape), CAUCHY_CLAMP, 1.0 - CAUCHY_CLAMP)
        return np.tan(np.pi * (u - 0.5))
    raise ValueError(f"family {family!r} has no noise")


def _reparameterize(family: str, loc: Tensor, scale: Tensor, eps: np.ndarray) -> Tensor:
    z = ad.add(loc, ad.mul(scale, eps))
    return ad.exp(z) if family == LOG_GAUSSIAN else z


def _log_prob(family: str, x: np.ndarray, loc: np.ndarray, scale: np.ndarray) -> np.ndarray:
    if family == GAUSSIAN:
        z = (x - loc) / scale
        return -0.5 * z * z - np.log(scale) - 0.5 * math.log(2 * math.pi)
    if family == CAUCHY:
        z = (x - loc) / scale
        return -np.log(np.pi * scale) - np.log1p(z * z)
    if family == LOG_GAUSSIAN:
        lx = np.log(x)
        return _log_prob(GAUSSIAN, lx, loc, scale) - lx
    raise ValueError("point masses have no density")


class ScaleDistribution:
    """A fully factorized distribution over one factor vector.

    For ``log_gaussian`` the parameters are those of the Gaussian in log space.
    ``point`` carries only a location.
    """

    def __init__(self, family: str, loc: Tensor, raw_scale: Optional[Tensor] = None):
        self.family = _check_family(family)
        self.loc = ad.as_tensor(loc)
        if family == POINT:
            raw_scale = None
        elif raw_scale is None:
            raise ValueError(f"{family} distribution needs a scale")
        self.raw_scale = None if raw_scale is None else ad.as_tensor(raw_scale)

    @classmethod
    def create(cls, family: str, loc, scale=None, trainable: bool = False) -> "ScaleDistribution":
        loc_t = Tensor(np.array(loc, dtype=np.float64), requires_grad=trainable)
        raw = None
        if family != POINT:
            scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), loc_t.shape)
            raw = Tensor(inverse_softplus(scale), requires_grad=trainable)
        return cls(family, loc_t, raw)

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]

    @property
    def scale(self) -> Optional[Tensor]:
        return None if self.raw_scale is None else ad.softplus(self.raw_scale)

    def log_prob(self, x) -> np.ndarray:
        """Per-coordinate log density at ``x`` (plain arrays, no tape)."""
        return _log_prob(self.family, np.asarray(x), self.loc.data, self.scale.data)

    def mean(self) -> Tensor:
        """Component mean; for Cauchy (no mean) the location is used."""
        if self.family == LOG_GAUSSIAN:
            return ad.exp(ad.add(self.loc, ad.mul(ad.square(self.scale), 0.5)))
        return self.loc

    def __repr__(self) -> str:
        return f"ScaleDistribution({self.family}, dim={self.dim})"


class MixtureDistribution:
    """Uniform mixture of K same-family components over one factor vector.

    Component parameters are stored stacked, ``loc`` and ``raw_scale`` of
    shape ``[K, dim]``.
    """

    def __init__(self, family: str, loc: Tensor, raw_scale: Optional[Tensor] = None):
        self.family = _check_family(family)
        self.loc = ad.as_tensor(loc)
        if self.loc.ndim != 2 or self.loc.shape[0] < 1:
            raise ValueError(f"mixture loc must be [K, dim] with K >= 1, got {self.loc.shape}")
        if family == POINT:
            raw_scale = None
        elif raw_scale is None:
            raise ValueError(f"{family} mixture needs a scale")
        self.raw_scale = None if raw_scale is None else ad.as_tensor(raw_scale)
        if self.raw_scale is not None and self.raw_scale.shape != self.loc.shape:
            raise ValueError("loc and scale shapes differ")

    @classmethod
    def create(cls, family: str, loc, scale=None, trainable: bool = False) -> "MixtureDistribution":
        loc = np.array(loc, dtype=np.float64)
        raw = None
        if family != POINT:
            raw = Tensor(inverse_softplus(np.broadcast_to(np.asarray(scale, float), loc.shape)),
                         requires_grad=trainable)
        return cls(family, Tensor(loc, requires_grad=trainable), raw)

    @classmethod
    def from_components(cls, components: Sequence[ScaleDistribution]) -> "MixtureDistribution":
        if not components:
            raise ValueError("a mixture needs at least one component")
        fams = {c.family for c in components}
        dims = {c.dim for c in components}
        if len(fams) != 1 or len(dims) != 1:
            raise ValueError("mixture components must share family and dimension")
        family = components[0].family
        loc = ad.stack([c.loc for c in components])
        raw = None if family == POINT else ad.stack([c.raw_scale for c in components])
        return cls(family, loc, raw)

    @property
    def num_components(self) -> int:
        return self.loc.shape[0]

    @property
    def dim(self) -> int:
        return self.loc.shape[1]

    @property
    def weights(self) -> np.ndarray:
        k = self.num_components
        return np.full(k, 1.0 / k)

    @property
    def scale(self) -> Optional[Tensor]:
        return None if self.raw_scale is None else ad.softplus(self.raw_scale)

    def component(self, k: int) -> ScaleDistribution:
        raw = None if self.raw_scale is None else self.raw_scale[k]
        return ScaleDistribution(self.family, self.loc[k], raw)

    @property
    def components(self) -> List[ScaleDistribution]:
        return [self.component(k) for k in range(self.num_components)]

    def parameters(self) -> List[Tensor]:
        params = [self.loc] if self.raw_scale is None else [self.loc, self.raw_scale]
        return [p for p in params if p.requires_grad]

    def mean(self, component_index) -> Tensor:
        """Mean of the selected component(s), one row per index."""
        idx = np.asarray(component_index, dtype=np.intp)
        loc = self.loc[idx]
        if self.family == LOG_GAUSSIAN:
            return ad.exp(ad.add(loc, ad.mul(ad.square(self.scale[idx]), 0.5)))
        return loc

    def __repr__(self) -> str:
        return f"MixtureDistribution({self.family}, K={self.num_components}, dim={self.dim})"


Distribution = Union[ScaleDistribution, MixtureDistribution]


def sample(d: Distribution, rng: np.random.Generator, component_index=None,
           shared: bool = False) -> Tensor:
    """Reparameterized draw; gradients flow to ``loc`` and the raw scale.

    For a mixture, ``component_index`` is required: an int gives one vector,
    an integer array gives one row per entry with fresh noise per row. With
    ``shared=True`` rows that select the same component reuse one draw.
    """
    if isinstance(d, MixtureDistribution):
        if component_index is None:
            raise ValueError("sampling a mixture requires component_index")
        idx = np.asarray(component_index, dtype=np.intp)
        if np.any((idx < 0) | (idx >= d.num_components)):
            raise IndexError("component_index out of range")
        loc = d.loc[idx]
        if d.family == POINT:
            return loc
        scale = d.scale[idx]
        if shared and idx.ndim == 1:
            per_comp = _noise(d.family, (d.num_components, d.dim), rng)
            eps = per_comp[idx]
        else:
            eps = _noise(d.family, loc.shape, rng)
        return _reparameterize(d.family, loc, scale, eps)
    if d.family == POINT:
        return d.loc
    eps = _noise(d.family, d.loc.shape, rng)
    return _reparameterize(d.family, d.loc, d.scale, eps)


def _kl_terms(family: str, loc_q: Tensor, scale_q: Tensor, loc_p: Tensor, scale_p: Tensor) -> Tensor:
    if family in (GAUSSIAN, LOG_GAUSSIAN):
        # log(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2
        num = ad.add(ad.square(scale_q), ad.square(ad.sub(loc_q, loc_p)))
        return ad.sub(ad.add(ad.log(ad.div(scale_p, scale_q)),
                             ad.div(num, ad.mul(ad.square(scale_p), 2.0))), 0.5)
    if family == CAUCHY:
        num = ad.add(ad.square(ad.add(scale_q, scale_p)), ad.square(ad.sub(loc_q, loc_p)))
        return ad.log(ad.div(num, ad.mul(ad.mul(scale_q, scale_p), 4.0)))
    raise ValueError(f"no closed-form KL for {family!r}")


def _validate_pair(q, p) -> None:
    if q.family != POINT and q.family != p.family:
        raise ValueError(f"KL between different families: {q.family} vs {p.family}")
    if q.loc.shape[-1] != p.loc.shape[-1]:
        raise ValueError(f"KL dimension mismatch: {q.loc.shape[-1]} vs {p.loc.shape[-1]}")


def _check_scale(s: Tensor) -> None:
    if np.any(s.data <= 0):
        raise ValueError("non-positive scale")


def kl_divergence(q: ScaleDistribution, p: ScaleDistribution) -> Tensor:
    """KL(q || p) summed over independent coordinates, as a scalar Tensor.

    A point-mass ``q`` contributes zero by convention, which keeps point
    posteriors (BatchEnsemble-style members) on the same code path.
    """
    _validate_pair(q, p)
    if q.family == POINT:
        return Tensor(0.0)
    sq, sp = q.scale, p.scale
    _check_scale(sq)
    _check_scale(sp)
    return ad.reduce_sum(_kl_terms(q.family, q.loc, sq, p.loc, sp))


def kl_mixture(q: MixtureDistribution, p: MixtureDistribution) -> Tensor:
    """Paired-component bound (1/K) sum_k KL(q_k || p_k) on the mixture KL."""
    if q.num_components != p.num_components:
        raise ValueError(f"mixture sizes differ: {q.num_components} vs {p.num_components}")
    _validate_pair(q, p)
    if q.family == POINT:
        return Tensor(0.0)
    sq, sp = q.scale, p.scale
    _check_scale(sq)
    _check_scale(sp)
    total = ad.reduce_sum(_kl_terms(q.family, q.loc, sq, p.loc, sp))
    return ad.mul(total, 1.0 / q.num_components)
