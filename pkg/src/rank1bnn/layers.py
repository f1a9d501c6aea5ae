"""Rank-1 Bayesian layers: W' = W o r s^T with mixture posteriors on r and s.

All layers consume a duplicated batch: with ensemble size K and a batch of
``n`` rows, rows ``[k*n/K, (k+1)*n/K)`` belong to mixture component ``k``.
Instead of materializing W' per example, the forward pass scales the inputs
by S and the pre-activations by R::

    phi(((X o S) W^T) o R + b)

which is the same number as phi((W o r s^T) x) row by row.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rank1bnn import autodiff as ad
from rank1bnn import distributions as dist
from rank1bnn.autodiff import Tensor
from rank1bnn.distributions import MixtureDistribution

SAMPLE = "sample"
MEAN = "mean"

ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
}


def glorot_normal(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def ones_factor(ensemble_size: int, dim: int) -> MixtureDistribution:
    """Frozen point mass at 1: the factor drops out of the layer."""
    return MixtureDistribution.create(dist.POINT, np.ones((ensemble_size, dim)), trainable=False)


def component_indices(num_rows: int, ensemble_size: int) -> np.ndarray:
    """Component owning each row of a K-fold duplicated batch."""
    if num_rows % ensemble_size:
        raise ValueError(
            f"batch of {num_rows} rows is not divisible by ensemble size {ensemble_size}")
    return np.arange(num_rows) // (num_rows // ensemble_size)


class _FactorPair:
    """Posterior/prior bookkeeping shared by every rank-1 linear map."""

    def __init__(self, name: str, dim: int, posterior: Optional[MixtureDistribution],
                 prior: Optional[MixtureDistribution], ensemble_size: int):
        if posterior is None:
            posterior = ones_factor(ensemble_size, dim)
        if posterior.dim != dim:
            raise ValueError(f"{name} posterior has dimension {posterior.dim}, expected {dim}")
        if posterior.num_components != ensemble_size:
            raise ValueError(f"{name} posterior has {posterior.num_components} components, "
                             f"expected {ensemble_size}")
        if posterior.family != dist.POINT:
            if prior is None:
                raise ValueError(f"stochastic {name} posterior needs a prior")
            if prior.dim != dim or prior.num_components != ensemble_size:
                raise ValueError(f"{name} prior shape does not match its posterior")
        self.name = name
        self.posterior = posterior
        self.prior = prior

    @property
    def stochastic(self) -> bool:
        return self.posterior.family != dist.POINT

    def draw(self, idx: np.ndarray, mode: str, rng, per_example: bool) -> Tensor:
        if mode == MEAN or not self.stochastic:
            return self.posterior.mean(idx)
        if mode != SAMPLE:
            raise ValueError(f"unknown mode {mode!r}")
        if rng is None:
            raise ValueError("sample mode needs an rng")
        return dist.sample(self.posterior, rng, idx, shared=not per_example)

    def kl(self) -> Tensor:
        if not self.stochastic:
            return Tensor(0.0)
        return dist.kl_mixture(self.posterior, self.prior)

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = {f"{prefix}{self.name}.loc": self.posterior.loc}
        if self.posterior.raw_scale is not None:
            out[f"{prefix}{self.name}.raw_scale"] = self.posterior.raw_scale
        return out


class Rank1Layer:
    """Common surface: parameters, KL, placement."""

    ensemble_size: int
    factor_pairs: Tuple[_FactorPair, ...] = ()
    kernels: Tuple[str, ...] = ("kernel",)

    def kl(self) -> Tensor:
        total = Tensor(0.0)
        for pair in self.factor_pairs:
            total = ad.add(total, pair.kl())
        return total

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {}
        for name in self.kernels + ("bias",):
            out[prefix + name] = getattr(self, name)
        for pair in self.factor_pairs:
            out.update(pair.named_parameters(prefix))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def kernel_tensors(self) -> List[Tensor]:
        return [getattr(self, name) for name in self.kernels]


class Rank1Dense(Rank1Layer):
    """Dense layer with kernel ``W[m, d]``, output factor r (m) and input factor s (d)."""

    def __init__(self, in_features: int, out_features: int, ensemble_size: int = 1,
                 r_posterior: Optional[MixtureDistribution] = None,
                 s_posterior: Optional[MixtureDistribution] = None,
                 r_prior: Optional[MixtureDistribution] = None,
                 s_prior: Optional[MixtureDistribution] = None,
                 activation: Optional[str] = None,
                 rng: Optional[np.random.Generator] = None,
                 kernel: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.ensemble_size = ensemble_size
        self.activation = activation
        if kernel is None:
            kernel = he_normal((out_features, in_features), in_features, rng)
        self.kernel = Tensor(np.array(kernel, dtype=np.float64), requires_grad=True)
        if self.kernel.shape != (out_features, in_features):
            raise ValueError(f"kernel shape {self.kernel.shape} != {(out_features, in_features)}")
        self.bias = Tensor(np.zeros(out_features) if bias is None else np.array(bias, float),
                           requires_grad=True)
        self.r = _FactorPair("r", out_features, r_posterior, r_prior, ensemble_size)
        self.s = _FactorPair("s", in_features, s_posterior, s_prior, ensemble_size)
        self.factor_pairs = (self.r, self.s)

    @property
    def placement(self) -> str:
        return {(True, True): "both", (True, False): "r_only",
                (False, True): "s_only", (False, False): "none"}[
                    (self.r.stochastic, self.s.stochastic)]

    def forward(self, x: Tensor, mode: str = SAMPLE, rng=None, per_example: bool = True) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ad.ShapeError(f"expected input [n, {self.in_features}], got {x.shape}")
        idx = component_indices(x.shape[0], self.ensemble_size)
        s = self.s.draw(idx, mode, rng, per_example)
        r = self.r.draw(idx, mode, rng, per_example)
        pre = ad.add(ad.mul(ad.matmul(ad.mul(x, s), ad.transpose(self.kernel)), r), self.bias)
        return ACTIVATIONS[self.activation](pre)

    __call__ = forward


def _same_padding(size: int, k: int, stride: int) -> Tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def im2col(x: Tensor, kh: int, kw: int, stride: int, padding: str) -> Tuple[Tensor, int, int]:
    """Patches of an NHWC tensor as rows ``[n*Ho*Wo, kh*kw*cin]``."""
    n, h, w, c = x.shape
    if padding == "same":
        ho, top, bottom = _same_padding(h, kh, stride)
        wo, left, right = _same_padding(w, kw, stride)
        x = ad.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    elif padding == "valid":
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ad.ShapeError(f"kernel {(kh, kw)} larger than input {(h, w)}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ri = (np.arange(ho) * stride)[:, None] + np.arange(kh)[None, :]
    ci = (np.arange(wo) * stride)[:, None] + np.arange(kw)[None, :]
    patches = ad.getitem(x, (slice(None), ri[:, None, :, None], ci[None, :, None, :], slice(None)))
    return ad.reshape(patches, (n * ho * wo, kh * kw * c)), ho, wo


class Rank1Conv2D(Rank1Layer):
    """2-D convolution on NHWC inputs, kernel ``[kh, kw, cin, cout]``.

    r scales output channels and s scales input channels.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size=(3, 3),
                 ensemble_size: int = 1, stride: int = 1, padding: str = "same",
                 r_posterior=None, s_posterior=None, r_prior=None, s_prior=None,
                 activation: Optional[str] = None, rng=None, kernel=None, bias=None):
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size, kernel_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = kernel_size
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = (kh, kw), stride, padding
        self.ensemble_size = ensemble_size
        self.activation = activation
        shape = (kh, kw, in_channels, out_channels)
        if kernel is None:
            kernel = he_normal(shape, kh * kw * in_channels, rng)
        self.kernel = Tensor(np.array(kernel, dtype=np.float64), requires_grad=True)
        if self.kernel.shape != shape:
            raise ValueError(f"kernel shape {self.kernel.shape} != {shape}")
        self.bias = Tensor(np.zeros(out_channels) if bias is None else np.array(bias, float),
                           requires_grad=True)
        self.r = _FactorPair("r", out_channels, r_posterior, r_prior, ensemble_size)
        self.s = _FactorPair("s", in_channels, s_posterior, s_prior, ensemble_size)
        self.factor_pairs = (self.r, self.s)

    def forward(self, x: Tensor, mode: str = SAMPLE, rng=None, per_example: bool = True) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ad.ShapeError(f"expected NHWC input with {self.in_channels} channels, got {x.shape}")
        n = x.shape[0]
        idx = component_indices(n, self.ensemble_size)
        s = self.s.draw(idx, mode, rng, per_example)
        r = self.r.draw(idx, mode, rng, per_example)
        xs = ad.mul(x, ad.reshape(s, (n, 1, 1, self.in_channels)))
        kh, kw = self.kernel_size
        cols, ho, wo = im2col(xs, kh, kw, self.stride, self.padding)
        flat_kernel = ad.reshape(self.kernel, (kh * kw * self.in_channels, self.out_channels))
        out = ad.reshape(ad.matmul(cols, flat_kernel), (n, ho, wo, self.out_channels))
        out = ad.add(ad.mul(out, ad.reshape(r, (n, 1, 1, self.out_channels))), self.bias)
        return ACTIVATIONS[self.activation](out)

    __call__ = forward


class Rank1LSTMCell(Rank1Layer):
    """LSTM whose input and recurrent kernels each carry their own (r, s) pair.

    Gate order along the 4h axis is input, forget, cell, output. Factor
    samples are drawn once per sequence and reused at every time step.
    """

    kernels = ("input_kernel", "recurrent_kernel")

    def __init__(self, input_dim: int, hidden_dim: int, ensemble_size: int = 1,
                 factors: Optional[Dict[str, Tuple]] = None, rng=None,
                 input_kernel=None, recurrent_kernel=None, bias=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        factors = factors or {}
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.ensemble_size = ensemble_size
        g = 4 * hidden_dim
        if input_kernel is None:
            input_kernel = glorot_normal((g, input_dim), input_dim, g, rng)
        if recurrent_kernel is None:
            recurrent_kernel = glorot_normal((g, hidden_dim), hidden_dim, g, rng)
        self.input_kernel = Tensor(np.array(input_kernel, float), requires_grad=True)
        self.recurrent_kernel = Tensor(np.array(recurrent_kernel, float), requires_grad=True)
        if bias is None:
            bias = np.zeros(g)
            bias[hidden_dim:2 * hidden_dim] = 1.0  # forget-gate bias
        self.bias = Tensor(np.array(bias, float), requires_grad=True)
        dims = {"r_input": g, "s_input": input_dim, "r_recurrent": g, "s_recurrent": hidden_dim}
        pairs = {}
        for name, dim in dims.items():
            post, prior = factors.get(name, (None, None))
            pairs[name] = _FactorPair(name, dim, post, prior, ensemble_size)
        self.r_input, self.s_input = pairs["r_input"], pairs["s_input"]
        self.r_recurrent, self.s_recurrent = pairs["r_recurrent"], pairs["s_recurrent"]
        self.factor_pairs = tuple(pairs.values())

    def forward(self, x: Tensor, mode: str = SAMPLE, rng=None, per_example: bool = True,
                state: Optional[Tuple[Tensor, Tensor]] = None) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        """Run over ``x[n, T, input_dim]``; returns (outputs[n, T, h], (h_T, c_T))."""
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ad.ShapeError(f"expected input [n, T, {self.input_dim}], got {x.shape}")
        n, steps, _ = x.shape
        hd = self.hidden_dim
        idx = component_indices(n, self.ensemble_size)
        s_in = self.s_input.draw(idx, mode, rng, per_example)
        r_in = self.r_input.draw(idx, mode, rng, per_example)
        s_rec = self.s_recurrent.draw(idx, mode, rng, per_example)
        r_rec = self.r_recurrent.draw(idx, mode, rng, per_example)
        if state is None:
            h = Tensor(np.zeros((n, hd)))
            c = Tensor(np.zeros((n, hd)))
        else:
            h, c = state
        wx_t = ad.transpose(self.input_kernel)
        wh_t = ad.transpose(self.recurrent_kernel)
        outputs = []
        for t in range(steps):
            xt = x[:, t, :]
            z = ad.add(ad.add(ad.mul(ad.matmul(ad.mul(xt, s_in), wx_t), r_in),
                              ad.mul(ad.matmul(ad.mul(h, s_rec), wh_t), r_rec)), self.bias)
            i = ad.sigmoid(z[:, :hd])
            f = ad.sigmoid(z[:, hd:2 * hd])
            g = ad.tanh(z[:, 2 * hd:3 * hd])
            o = ad.sigmoid(z[:, 3 * hd:])
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            outputs.append(h)
        return ad.stack(outputs, axis=1), (h, c)

    __call__ = forward


def induced_weight_sample(layer: Rank1Layer, rng: np.random.Generator, component: int = 0) -> np.ndarray:
    """One draw of the effective kernel W o r s^T for a dense or conv layer."""
    if not isinstance(layer, (Rank1Dense, Rank1Conv2D)):
        raise TypeError(f"induced weights are defined for dense and conv layers, not {type(layer).__name__}")
    with ad.no_grad():
        r = layer.r.draw(np.array([component]), SAMPLE, rng, True).data[0]
        s = layer.s.draw(np.array([component]), SAMPLE, rng, True).data[0]
    w = layer.kernel.data
    if isinstance(layer, Rank1Dense):
        return w * np.outer(r, s)
    return w * s[None, None, :, None] * r[None, None, None, :]


class Rank1MLP:
    """Stack of Rank1Dense layers; hidden layers share one activation, the last is linear."""

    def __init__(self, layers: Sequence[Rank1Dense]):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        sizes = {layer.ensemble_size for layer in layers}
        if len(sizes) != 1:
            raise ValueError(f"layers disagree on ensemble size: {sorted(sizes)}")
        self.layers = list(layers)
        self.ensemble_size = layers[0].ensemble_size

    def forward(self, x: Tensor, mode: str = SAMPLE, rng=None, per_example: bool = True) -> Tensor:
        h = ad.as_tensor(x)
        if h.ndim > 2:
            h = ad.reshape(h, (h.shape[0], -1))
        for layer in self.layers:
            h = layer.forward(h, mode, rng, per_example)
        return h

    __call__ = forward

    def kl(self) -> Tensor:
        total = Tensor(0.0)
        for layer in self.layers:
            total = ad.add(total, layer.kl())
        return total

    def kernel_tensors(self) -> List[Tensor]:
        return [k for layer in self.layers for k in layer.kernel_tensors()]

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"layer{i}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]
