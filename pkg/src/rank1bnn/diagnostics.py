"""Self-checks: finite-difference gradients, KL closed forms vs Monte Carlo, induced priors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import stats

from rank1bnn import autodiff as ad
from rank1bnn import distributions as dist
from rank1bnn import layers
from rank1bnn import objectives
from rank1bnn.autodiff import Tensor
from rank1bnn.distributions import MixtureDistribution, ScaleDistribution


@dataclass
class GradcheckCase:
    name: str
    fn: Callable[[], Tensor]
    params: Sequence[Tensor]


def _leaf(rng, shape, low=None, high=None, away_from_zero: float = 0.0) -> Tensor:
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.normal(size=shape)
        if away_from_zero:
            data = np.where(np.abs(data) < away_from_zero,
                            np.sign(data + 1e-300) * away_from_zero + data, data)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize with fixed random weights so every output coordinate matters."""
    return ad.reduce_sum(ad.mul(out, weights))


def _stochastic_pair(rng, family: str, k: int, dim: int):
    loc = rng.normal(1.0, 0.3, size=(k, dim))
    scale = rng.uniform(0.1, 0.4, size=(k, dim))
    if family == dist.LOG_GAUSSIAN:
        loc = rng.normal(0.0, 0.2, size=(k, dim))
    post = MixtureDistribution.create(family, loc, scale, trainable=True)
    prior = MixtureDistribution.create(family, np.ones((k, dim)) if family != dist.LOG_GAUSSIAN
                                       else np.zeros((k, dim)), np.full((k, dim), 0.5))
    return post, prior


def _layer_case(name: str, layer, x: np.ndarray, seed: int, out_rng) -> GradcheckCase:
    probe = layer.forward(Tensor(x), "sample", np.random.default_rng(seed))
    if isinstance(probe, tuple):
        probe = probe[0]
    weights = out_rng.normal(size=probe.shape)

    def fn():
        out = layer.forward(Tensor(x), "sample", np.random.default_rng(seed))
        if isinstance(out, tuple):
            out = out[0]
        return ad.add(_project(out, weights), layer.kl())

    return GradcheckCase(name, fn, layer.parameters())


def gradcheck_cases(seed: int) -> List[GradcheckCase]:
    """Every differentiable primitive, each KL family, each likelihood and each layer type."""
    rng = np.random.default_rng(seed)
    cases: List[GradcheckCase] = []

    def unary(name, op, **leaf_kw):
        x = _leaf(rng, (3, 4), **leaf_kw)
        w = rng.normal(size=(3, 4))
        cases.append(GradcheckCase(name, lambda x=x, w=w: _project(op(x), w), [x]))

    for name in ("tanh", "sigmoid", "softplus", "exp", "square", "neg"):
        unary(name, lambda t, n=name: ad.elementwise(n, t))
    unary("sqrt", ad.sqrt, low=0.5, high=2.0)
    unary("log", ad.log, low=0.5, high=2.0)
    unary("relu", ad.relu, away_from_zero=0.1)
    unary("abs", ad.abs_, away_from_zero=0.1)
    unary("log_softmax", lambda t: ad.log_softmax(t, axis=1))
    unary("softmax", lambda t: ad.softmax(t, axis=0))
    unary("reshape", lambda t: ad.mul(ad.reshape(ad.reshape(t, (4, 3)), (3, 4)), t))
    unary("transpose", lambda t: ad.matmul(t, ad.transpose(t))[:, :1])
    unary("getitem_pad", lambda t: ad.pad(t[1:, ::2], ((1, 0), (0, 2))))
    for op in ("sum", "mean", "logsumexp"):
        x = _leaf(rng, (3, 4))
        w = rng.normal(size=4)
        cases.append(GradcheckCase(f"reduce_{op}", lambda x=x, w=w, op=op: _project(ad.reduce(op, x, axis=0), w), [x]))

    for name in ("add", "sub", "mul", "div"):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (3, 4), low=0.5, high=2.0) if name == "div" else _leaf(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        cases.append(GradcheckCase(name, lambda a=a, b=b, n=name, w=w: _project(ad.elementwise(n, a, b), w), [a, b]))
    a, v = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    w = rng.normal(size=(3, 4))
    cases.append(GradcheckCase("broadcast_mul", lambda a=a, v=v, w=w: _project(ad.mul(a, v), w), [a, v]))
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = rng.normal(size=(3, 2))
    cases.append(GradcheckCase("matmul", lambda a=a, b=b, w=w: _project(ad.matmul(a, b), w), [a, b]))
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    w = rng.normal(size=(2, 2, 3))
    cases.append(GradcheckCase("stack", lambda a=a, b=b, w=w: _project(ad.stack([a, b]), w), [a, b]))
    w2 = rng.normal(size=(2, 6))
    cases.append(GradcheckCase("concatenate", lambda a=a, b=b: _project(ad.concatenate([a, b], axis=1), w2), [a, b]))

    for family in (dist.GAUSSIAN, dist.CAUCHY, dist.LOG_GAUSSIAN):
        q, p = _stochastic_pair(rng, family, 2, 3)
        p = MixtureDistribution(family, Tensor(p.loc.data + rng.normal(size=p.loc.shape), requires_grad=True),
                                Tensor(p.raw_scale.data, requires_grad=True))
        cases.append(GradcheckCase(f"kl_{family}", lambda q=q, p=p: dist.kl_mixture(q, p),
                                   q.parameters() + p.parameters()))
        w = rng.normal(size=(2, 3))
        cases.append(GradcheckCase(
            f"sample_{family}",
            lambda q=q, w=w: _project(dist.sample(q, np.random.default_rng(seed), np.array([0, 1])), w),
            q.parameters()))

    labels = rng.integers(0, 3, size=5)
    for mode in objectives.LikelihoodMode:
        logits = _leaf(rng, (4, 5, 3))
        cases.append(GradcheckCase(f"nll_{mode.value}",
                                   lambda logits=logits, mode=mode: objectives.nll(mode, logits, labels),
                                   [logits]))

    k = 2
    def factors(in_dim, out_dim, placement="both"):
        r_post, r_prior = _stochastic_pair(rng, dist.GAUSSIAN, k, out_dim)
        s_post, s_prior = _stochastic_pair(rng, dist.GAUSSIAN, k, in_dim)
        if placement == "r_only":
            s_post, s_prior = None, None
        return dict(r_posterior=r_post, r_prior=r_prior, s_posterior=s_post, s_prior=s_prior)

    dense = layers.Rank1Dense(3, 4, k, activation="tanh", rng=rng, **factors(3, 4))
    cases.append(_layer_case("rank1_dense", dense, rng.normal(size=(4, 3)), seed, rng))
    dense_r = layers.Rank1Dense(3, 2, k, activation="softplus", rng=rng, **factors(3, 2, "r_only"))
    cases.append(_layer_case("rank1_dense_r_only", dense_r, rng.normal(size=(2, 3)), seed, rng))
    conv = layers.Rank1Conv2D(2, 3, (3, 3), k, stride=1, padding="same", activation="tanh", rng=rng,
                              **factors(2, 3))
    cases.append(_layer_case("rank1_conv2d", conv, rng.normal(size=(2, 4, 4, 2)), seed, rng))
    conv_v = layers.Rank1Conv2D(2, 2, (2, 2), k, stride=2, padding="valid", rng=rng, **factors(2, 2))
    cases.append(_layer_case("rank1_conv2d_valid", conv_v, rng.normal(size=(2, 4, 4, 2)), seed, rng))
    lstm_factors = {}
    for name, dim in (("r_input", 8), ("s_input", 3), ("r_recurrent", 8), ("s_recurrent", 2)):
        lstm_factors[name] = _stochastic_pair(rng, dist.GAUSSIAN, k, dim)
    lstm = layers.Rank1LSTMCell(3, 2, k, lstm_factors, rng=rng)
    cases.append(_layer_case("rank1_lstm", lstm, rng.normal(size=(2, 3, 3)), seed, rng))

    mlp = layers.Rank1MLP([
        layers.Rank1Dense(2, 4, k, activation="tanh", rng=rng, **factors(2, 4)),
        layers.Rank1Dense(4, 3, k, rng=rng, **factors(4, 3)),
    ])
    xb = np.concatenate([rng.normal(size=(3, 2))] * k)
    yb = np.concatenate([rng.integers(0, 3, size=3)] * k)
    cfg = objectives.ElboConfig(train_set_size=30, batch_size=3, l2=1e-2, kl_annealing_epochs=2)
    cases.append(GradcheckCase(
        "elbo_loss",
        lambda: objectives.elbo_loss(mlp, (xb, yb), 1, cfg, np.random.default_rng(seed)),
        mlp.parameters()))
    return cases


def run_gradcheck(seeds: Iterable[int], h: float = 1e-5, rtol: float = 1e-4,
                  names: Sequence[str] = ()) -> List[dict]:
    """One record per (case, seed): worst per-coordinate relative error and pass flag."""
    records = []
    for seed in seeds:
        for case in gradcheck_cases(seed):
            if names and case.name not in names:
                continue
            out = case.fn()
            analytic = ad.grad(out, case.params)
            worst = 0.0
            for p, a in zip(case.params, analytic):
                num = ad.numerical_gradient(case.fn, p, h)
                worst = max(worst, float(ad.relative_error(a.data, num).max(initial=0.0)))
            records.append({"check": case.name, "seed": seed, "max_rel_error": worst,
                            "passed": worst < rtol})
    return records


# ------------------------------------------------------------------ KL checks
def _scipy_dist(family: str, loc: float, scale: float):
    if family == dist.GAUSSIAN:
        return stats.norm(loc, scale)
    if family == dist.CAUCHY:
        return stats.cauchy(loc, scale)
    if family == dist.LOG_GAUSSIAN:
        return stats.lognorm(s=scale, scale=math.exp(loc))
    raise ValueError(f"no reference density for {family!r}")


def kl_monte_carlo(family: str, q: Tuple[float, float], p: Tuple[float, float],
                   num_samples: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Mean and standard error of log q(x) - log p(x), x ~ q, using reference densities."""
    qd, pd = _scipy_dist(family, *q), _scipy_dist(family, *p)
    x = qd.rvs(size=num_samples, random_state=rng)
    ratio = qd.logpdf(x) - pd.logpdf(x)
    return float(ratio.mean()), float(ratio.std(ddof=1) / math.sqrt(num_samples))


def closed_form_kl(family: str, q: Tuple[float, float], p: Tuple[float, float]) -> float:
    qd = ScaleDistribution.create(family, [q[0]], [q[1]])
    pd = ScaleDistribution.create(family, [p[0]], [p[1]])
    return dist.kl_divergence(qd, pd).item()


def run_kl_check(num_params: int = 10, num_samples: int = 100_000, seed: int = 0,
                 families: Sequence[str] = (dist.GAUSSIAN, dist.CAUCHY, dist.LOG_GAUSSIAN),
                 num_se: float = 3.0) -> List[dict]:
    rng = np.random.default_rng(seed)
    records = []
    for family in families:
        for i in range(num_params):
            q = (float(rng.normal()), float(rng.uniform(0.5, 2.0)))
            p = (float(rng.normal()), float(rng.uniform(0.5, 2.0)))
            exact = closed_form_kl(family, q, p)
            mc, se = kl_monte_carlo(family, q, p, num_samples, rng)
            records.append({"family": family, "index": i, "q": list(q), "p": list(p),
                            "closed_form": exact, "monte_carlo": mc, "std_error": se,
                            "passed": abs(exact - mc) <= num_se * se})
    return records


# -------------------------------------------------------------- induced prior
def induced_prior_samples(r_family: str, num_draws: int, rng: np.random.Generator,
                          r_loc: float = 0.0, r_scale: float = 1.0) -> np.ndarray:
    """Draws of w' = w * r with w ~ N(0, 1), s fixed at 1 and r from ``r_family``.

    Samples go through a one-input dense layer whose r factor has ``num_draws``
    coordinates, so each output row is an independent (w, r) pair.
    """
    kernel = rng.normal(size=(num_draws, 1))
    if r_family == dist.POINT:
        r_post, r_prior = None, None
    else:
        r_post = MixtureDistribution.create(r_family, np.full((1, num_draws), r_loc),
                                            np.full((1, num_draws), r_scale))
        r_prior = r_post
    layer = layers.Rank1Dense(1, num_draws, 1, r_posterior=r_post, r_prior=r_prior, kernel=kernel)
    return layers.induced_weight_sample(layer, rng)[:, 0]


def tail_summary(samples: np.ndarray, threshold: float = 5.0) -> dict:
    tail = np.abs(samples) > threshold
    p = float(tail.mean())
    return {"excess_kurtosis": float(stats.kurtosis(samples, fisher=True)),
            "tail_fraction": p, "tail_std_error": math.sqrt(p * (1 - p) / samples.size),
            "threshold": threshold, "num_draws": int(samples.size)}


def write_samples_csv(path, samples: Dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r_family", "w_prime"])
        for family, values in samples.items():
            for v in values:
                writer.writerow([family, repr(float(v))])
