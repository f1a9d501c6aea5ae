"""Second-order equivalence of full-rank and rank-1 multiplicative perturbations.

For a tanh MLP score ``f(x) = a^T x_H`` with ``x_h = sqrt(c/M) tanh(W_h x_{h-1})``,
perturbing ``W_h`` by ``dW_ij = W_ij d_j`` with ``d ~ N(0, Sigma)`` produces the
same quadratic fluctuation as perturbing the input-side factor ``s`` of
``W_h o 1 s^T`` around ``s = 1`` with covariance ``Sigma``::

    trace(H_W Cov_W) == trace(H_s Sigma),   Cov_W[(i,j),(k,l)] = W_ij Sigma_jl W_kl

Both sides are evaluated exactly from autodiff Hessians; a Monte Carlo
estimator of the left side is provided as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from rank1bnn import autodiff as ad
from rank1bnn.autodiff import Tensor

SMOOTH_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "softplus": ad.softplus}


class CovarianceError(ValueError):
    pass


@dataclass
class FCNetSpec:
    weights: List[np.ndarray]
    a: np.ndarray
    c_sigma: float = 2.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in SMOOTH_ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} is not usable: the identity needs a twice "
                f"differentiable activation with non-zero second derivative, one of "
                f"{sorted(SMOOTH_ACTIVATIONS)}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        m = self.a.size
        if not self.weights:
            raise ValueError("need at least one layer")
        for h, w in enumerate(self.weights, 1):
            if w.shape != (m, m):
                raise ValueError(f"layer {h} weight has shape {w.shape}, expected {(m, m)}")

    @property
    def width(self) -> int:
        return self.a.size

    @property
    def depth(self) -> int:
        return len(self.weights)

    @classmethod
    def random(cls, width: int, depth: int, rng: np.random.Generator,
               c_sigma: float = 2.0, activation: str = "tanh") -> "FCNetSpec":
        weights = [rng.normal(size=(width, width)) for _ in range(depth)]
        return cls(weights, rng.normal(size=width), c_sigma, activation)


def score(net: FCNetSpec, x, layer_weights: Optional[dict] = None) -> Tensor:
    """f(x) as a scalar tensor; ``layer_weights`` maps 1-based layer -> weight tensor."""
    act = SMOOTH_ACTIVATIONS[net.activation]
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != net.width:
        raise ValueError(f"input has {x.size} entries, network width is {net.width}")
    scale = math.sqrt(net.c_sigma / net.width)
    h = Tensor(x.reshape(-1, 1))
    for idx, w in enumerate(net.weights, 1):
        w_t = (layer_weights or {}).get(idx, Tensor(w))
        h = ad.mul(act(ad.matmul(w_t, h)), scale)
    return ad.reduce_sum(ad.matmul(Tensor(net.a.reshape(1, -1)), h))


def validate_covariance(sigma, width: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (width, width):
        raise CovarianceError(f"covariance has shape {sigma.shape}, expected {(width, width)}")
    if not np.all(np.isfinite(sigma)):
        raise CovarianceError("covariance has non-finite entries")
    if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-12:
        raise CovarianceError("covariance is not symmetric")
    lowest = float(np.linalg.eigvalsh(sigma).min())
    if lowest < -1e-10:
        raise CovarianceError(f"covariance is not positive semi-definite (eigenvalue {lowest:.3e})")
    return sigma


def _check_layer(net: FCNetSpec, h: int) -> None:
    if not 1 <= h <= net.depth:
        raise ValueError(f"layer {h} outside [1, {net.depth}]")


def weight_hessian(net: FCNetSpec, x, h: int) -> np.ndarray:
    """Hessian of f w.r.t. row-major vec(W_h), shape [M*M, M*M]."""
    _check_layer(net, h)
    w = Tensor(net.weights[h - 1].copy(), requires_grad=True)
    return ad.hessian(score(net, x, {h: w}), w)


def factor_hessian(net: FCNetSpec, x, h: int) -> np.ndarray:
    """Hessian of f w.r.t. s at s = 1 for layer ``W_h o 1 s^T``, shape [M, M]."""
    _check_layer(net, h)
    s = Tensor(np.ones(net.width), requires_grad=True)
    w = ad.mul(Tensor(net.weights[h - 1]), ad.reshape(s, (1, -1)))
    return ad.hessian(score(net, x, {h: w}), s)


def multiplicative_covariance(w: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Cov_W[(i,j),(k,l)] = W_ij Sigma_jl W_kl over row-major vec(W)."""
    m, n = w.shape
    return np.einsum("ij,jl,kl->ijkl", w, sigma, w).reshape(m * n, m * n)


def lhs_fullrank(net: FCNetSpec, x, h: int, sigma, hessian: Optional[np.ndarray] = None) -> float:
    """E[vec(dW)^T H_W vec(dW)] under the multiplicative covariance, exactly."""
    sigma = validate_covariance(sigma, net.width)
    hw = weight_hessian(net, x, h) if hessian is None else hessian
    cov = multiplicative_covariance(net.weights[h - 1], sigma)
    return float(np.sum(hw * cov.T))


def rhs_rank1(net: FCNetSpec, x, h: int, sigma, hessian: Optional[np.ndarray] = None) -> float:
    """E[ds^T H_s ds] with Cov(ds) = Sigma, exactly."""
    sigma = validate_covariance(sigma, net.width)
    hs = factor_hessian(net, x, h) if hessian is None else hessian
    return float(np.sum(hs * sigma.T))


def lhs_monte_carlo(net: FCNetSpec, x, h: int, sigma, num_samples: int,
                    rng: np.random.Generator, hessian: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Sample mean and standard error of vec(dW)^T H_W vec(dW), dW_ij = W_ij d_j."""
    sigma = validate_covariance(sigma, net.width)
    hw = weight_hessian(net, x, h) if hessian is None else hessian
    w = net.weights[h - 1]
    d = rng.multivariate_normal(np.zeros(net.width), sigma, size=num_samples, method="eigh")
    dw = (w[None, :, :] * d[:, None, :]).reshape(num_samples, -1)
    q = np.einsum("ni,ij,nj->n", dw, hw, dw)
    return float(q.mean()), float(q.std(ddof=1) / math.sqrt(num_samples))


def relative_discrepancy(lhs: float, rhs: float, floor: float = 1e-12) -> float:
    """|lhs - rhs| relative to the smaller magnitude, so a factor-2 mismatch reads as 1."""
    return abs(lhs - rhs) / max(min(abs(lhs), abs(rhs)), floor)


def random_covariance(width: int, rng: np.random.Generator, dof: Optional[int] = None) -> np.ndarray:
    """Wishart draw G G^T / dof with G of shape [width, dof]."""
    dof = dof or width + 2
    g = rng.normal(size=(width, dof))
    sigma = g @ g.T / dof
    return 0.5 * (sigma + sigma.T)


def verify(width: int, depth: int, num_trials: int = 10, num_points: int = 5, seed: int = 0,
           c_sigma: float = 2.0, tol: float = 1e-6, activation: str = "tanh") -> dict:
    """Check the identity on every (point, layer, covariance draw) cell of a random net.

    The negative control compares the right side under Sigma with the left side
    under 2 * Sigma; it must show a large discrepancy.
    """
    rng = np.random.default_rng(seed)
    net = FCNetSpec.random(width, depth, rng, c_sigma, activation)
    points = rng.normal(size=(num_points, width))
    sigmas = [random_covariance(width, rng) for _ in range(num_trials)]
    cells = []
    control = None
    for n, x in enumerate(points):
        for h in range(1, depth + 1):
            hw = weight_hessian(net, x, h)
            hs = factor_hessian(net, x, h)
            for t, sigma in enumerate(sigmas):
                lhs = lhs_fullrank(net, x, h, sigma, hw)
                rhs = rhs_rank1(net, x, h, sigma, hs)
                cells.append({"point": n, "layer": h, "trial": t, "lhs": lhs, "rhs": rhs,
                              "rel_discrepancy": relative_discrepancy(lhs, rhs)})
                if control is None:
                    doubled = lhs_fullrank(net, x, h, 2.0 * sigma, hw)
                    control = {"point": n, "layer": h, "trial": t, "lhs_2sigma": doubled,
                               "rhs_sigma": rhs, "rel_discrepancy": relative_discrepancy(doubled, rhs)}
    worst = max(c["rel_discrepancy"] for c in cells)
    return {
        "width": width, "depth": depth, "num_trials": num_trials, "num_points": num_points,
        "seed": seed, "c_sigma": c_sigma, "tolerance": tol,
        "max_rel_discrepancy": worst, "passed": bool(worst < tol),
        "negative_control": control, "cells": cells,
    }
