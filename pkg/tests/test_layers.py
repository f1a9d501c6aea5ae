import math

import numpy as np
import pytest
from scipy import stats

from rank1bnn import autodiff as ad
from rank1bnn import distributions as dist
from rank1bnn import layers, objectives
from rank1bnn.autodiff import Tensor
from rank1bnn.diagnostics import induced_prior_samples, tail_summary
from rank1bnn.distributions import MixtureDistribution

from oracles import draw_like_layer, explicit_conv, explicit_dense, explicit_lstm, gaussian_pair


def point(values):
    return MixtureDistribution.create(dist.POINT, np.asarray(values, float))


def test_identity_layer_passes_input_through():
    layer = layers.Rank1Dense(2, 2, 1, kernel=np.eye(2))
    out = layer.forward(Tensor([[3.0, 5.0]]), "mean")
    assert out.data.tolist() == [[3.0, 5.0]]


@pytest.mark.parametrize("activation", [None, "tanh", "relu"])
def test_dense_matches_explicit_materialization(activation):
    rng = np.random.default_rng(0)
    k, rows = 2, 3
    r_post, r_prior = gaussian_pair(rng, k, 3)
    s_post, s_prior = gaussian_pair(rng, k, 4)
    layer = layers.Rank1Dense(4, 3, k, r_post, s_post, r_prior, s_prior, activation, rng,
                              bias=rng.normal(size=3))
    x = rng.normal(size=(k * rows, 4))
    out = layer.forward(Tensor(x), "sample", np.random.default_rng(42)).data
    s, r = draw_like_layer([layer.s, layer.r], k * rows, 42)
    ref = explicit_dense(layer.kernel.data, layer.bias.data, r, s, x, activation)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_dense_rows_use_their_component_mean():
    rng = np.random.default_rng(1)
    k = 3
    r, s = rng.normal(size=(k, 2)), rng.normal(size=(k, 5))
    layer = layers.Rank1Dense(5, 2, k, point(r), point(s), rng=rng)
    x = rng.normal(size=(2 * k, 5))
    out = layer.forward(Tensor(x), "mean").data
    comp = np.repeat(np.arange(k), 2)
    ref = explicit_dense(layer.kernel.data, layer.bias.data, r[comp], s[comp], x)
    assert np.max(np.abs(out - ref)) < 1e-12


@pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_explicit_materialization(stride, padding):
    rng = np.random.default_rng(2)
    k = 2
    r_post, r_prior = gaussian_pair(rng, k, 3)
    s_post, s_prior = gaussian_pair(rng, k, 2)
    layer = layers.Rank1Conv2D(2, 3, (3, 2), k, stride, padding, r_post, s_post, r_prior, s_prior,
                               activation="tanh", rng=rng, bias=rng.normal(size=3))
    x = rng.normal(size=(4, 5, 6, 2))
    out = layer.forward(Tensor(x), "sample", np.random.default_rng(7)).data
    s, r = draw_like_layer([layer.s, layer.r], 4, 7)
    ref = explicit_conv(layer.kernel.data, layer.bias.data, r, s, x, stride, padding, "tanh")
    assert out.shape == ref.shape
    assert np.max(np.abs(out - ref)) < 1e-12


def test_lstm_matches_explicit_recurrence():
    rng = np.random.default_rng(3)
    k, hd, din = 2, 3, 4
    dims = {"r_input": 4 * hd, "s_input": din, "r_recurrent": 4 * hd, "s_recurrent": hd}
    factors = {name: gaussian_pair(rng, k, d) for name, d in dims.items()}
    cell = layers.Rank1LSTMCell(din, hd, k, factors, rng=rng)
    x = rng.normal(size=(4, 5, din))
    out, (h, c) = cell.forward(Tensor(x), "sample", np.random.default_rng(9))
    drawn = draw_like_layer([cell.s_input, cell.r_input, cell.s_recurrent, cell.r_recurrent], 4, 9)
    ref = explicit_lstm(cell.input_kernel.data, cell.recurrent_kernel.data, cell.bias.data, drawn, x)
    assert out.shape == (4, 5, hd) and h.shape == c.shape == (4, hd)
    assert np.max(np.abs(out.data - ref)) < 1e-12
    assert np.array_equal(out.data[:, -1], h.data)


def test_batch_not_divisible_by_ensemble_size():
    layer = layers.Rank1Dense(2, 2, 3)
    with pytest.raises(ValueError, match="divisible"):
        layer.forward(Tensor(np.ones((4, 2))), "mean")


def test_factor_dimension_validation():
    with pytest.raises(ValueError):
        layers.Rank1Dense(3, 2, 1, r_posterior=point(np.ones((1, 3))))
    with pytest.raises(ValueError):
        layers.Rank1Dense(3, 2, 2, s_posterior=point(np.ones((1, 3))))
    post, _ = gaussian_pair(np.random.default_rng(0), 1, 2)
    with pytest.raises(ValueError, match="prior"):
        layers.Rank1Dense(3, 2, 1, r_posterior=post)


def test_batchensemble_special_case():
    rng = np.random.default_rng(4)
    k, b = 4, 3
    r, s = rng.normal(size=(k, 5)), rng.normal(size=(k, 6))
    layer = layers.Rank1Dense(6, 5, k, point(r), point(s), activation="relu", rng=rng,
                              bias=rng.normal(size=5))
    x = rng.normal(size=(b, 6))
    xd = np.concatenate([x] * k)
    sampled = layer.forward(Tensor(xd), "sample", np.random.default_rng(0)).data
    mean = layer.forward(Tensor(xd), "mean").data
    assert np.array_equal(sampled, mean)
    w, bias = layer.kernel.data, layer.bias.data
    for comp in range(k):
        member_kernel = w * np.outer(r[comp], s[comp])
        expected = np.maximum(x @ member_kernel.T + bias, 0.0)
        assert np.max(np.abs(sampled[comp * b:(comp + 1) * b] - expected)) < 1e-12


def test_deterministic_special_case_dense_conv_lstm():
    rng = np.random.default_rng(5)
    dense = layers.Rank1Dense(3, 2, 1, rng=rng, bias=rng.normal(size=2))
    x = rng.normal(size=(4, 3))
    assert np.array_equal(dense.forward(Tensor(x), "sample", rng).data,
                          x @ dense.kernel.data.T + dense.bias.data)
    conv = layers.Rank1Conv2D(2, 2, 3, 1, rng=rng)
    xi = rng.normal(size=(1, 4, 4, 2))
    ones = [np.ones((1, 2))] * 2
    ref = explicit_conv(conv.kernel.data, conv.bias.data, ones[0], ones[1], xi)
    assert np.max(np.abs(conv.forward(Tensor(xi), "sample", rng).data - ref)) < 1e-12
    cell = layers.Rank1LSTMCell(2, 3, 1, rng=rng)
    xs = rng.normal(size=(2, 4, 2))
    plain = explicit_lstm(cell.input_kernel.data, cell.recurrent_kernel.data, cell.bias.data,
                          (np.ones((2, 2)), np.ones((2, 12)), np.ones((2, 3)), np.ones((2, 12))), xs)
    out, _ = cell.forward(Tensor(xs), "sample", rng)
    assert np.max(np.abs(out.data - plain)) < 1e-12


def test_placement_and_kl():
    rng = np.random.default_rng(6)
    r_post, r_prior = gaussian_pair(rng, 1, 3)
    s_post, s_prior = gaussian_pair(rng, 1, 2)
    both = layers.Rank1Dense(2, 3, 1, r_post, s_post, r_prior, s_prior)
    r_only = layers.Rank1Dense(2, 3, 1, r_post, None, r_prior, None)
    s_only = layers.Rank1Dense(2, 3, 1, None, s_post, None, s_prior)
    assert (both.placement, r_only.placement, s_only.placement) == ("both", "r_only", "s_only")
    assert layers.Rank1Dense(2, 3, 1).placement == "none"
    assert r_only.s.kl().item() == 0.0

    def hand_kl(post, prior):
        m1, s1 = post.loc.data[0], post.scale.data[0]
        m2, s2 = prior.loc.data[0], prior.scale.data[0]
        return float(np.sum(np.log(s2 / s1) + (s1 ** 2 + (m1 - m2) ** 2) / (2 * s2 ** 2) - 0.5))

    expected = hand_kl(r_post, r_prior) + hand_kl(s_post, s_prior)
    assert abs(both.kl().item() - expected) < 1e-12
    same = MixtureDistribution.create(dist.GAUSSIAN, r_post.loc.data, r_post.scale.data)
    assert layers.Rank1Dense(2, 3, 1, r_post, None, same, None).kl().item() == 0.0


def test_additive_location_matches_mean_forward():
    """With a linear activation, E_r[forward] equals forward at r = E[r]."""
    rng = np.random.default_rng(7)
    r_post, r_prior = gaussian_pair(rng, 1, 2)
    layer = layers.Rank1Dense(3, 2, 1, r_post, None, r_prior, None, rng=rng, bias=rng.normal(size=2))
    x = rng.normal(size=3)
    n = 100_000
    out = layer.forward(Tensor(np.tile(x, (n, 1))), "sample", np.random.default_rng(8)).data
    mean_out = layer.forward(Tensor(x[None, :]), "mean").data[0]
    se = out.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - mean_out) < 3 * se)


def test_induced_weight_sample_with_unit_points_is_kernel():
    rng = np.random.default_rng(9)
    layer = layers.Rank1Dense(3, 2, 2, rng=rng)
    assert np.array_equal(layers.induced_weight_sample(layer, rng, 1), layer.kernel.data)
    conv = layers.Rank1Conv2D(2, 3, 3, 1, rng=rng)
    assert np.array_equal(layers.induced_weight_sample(conv, rng), conv.kernel.data)
    with pytest.raises(TypeError):
        layers.induced_weight_sample(layers.Rank1LSTMCell(2, 2), rng)


def test_induced_prior_heavier_tails():
    rng = np.random.default_rng(10)
    gauss = induced_prior_samples(dist.GAUSSIAN, 1_000_000, rng)
    cauchy = induced_prior_samples(dist.CAUCHY, 1_000_000, rng)
    g, c = tail_summary(gauss), tail_summary(cauchy)
    assert g["excess_kurtosis"] > 0
    assert abs(stats.kurtosis(gauss) - g["excess_kurtosis"]) < 1e-12
    assert c["tail_fraction"] - g["tail_fraction"] > 3 * math.hypot(c["tail_std_error"], g["tail_std_error"])


def _elbo_grad_variance(per_example, seeds=200):
    rng = np.random.default_rng(11)
    r_post, r_prior = gaussian_pair(rng, 1, 3, spread=0.1, scale=(0.3, 0.5))
    s_post, s_prior = gaussian_pair(rng, 1, 4, spread=0.1, scale=(0.3, 0.5))
    layer = layers.Rank1Dense(4, 3, 1, r_post, s_post, r_prior, s_prior, rng=rng)
    model = layers.Rank1MLP([layer])
    x = rng.normal(size=(32, 4))
    y = rng.integers(0, 3, size=32)
    cfg = objectives.ElboConfig(320, 32)
    grads = []
    for seed in range(seeds):
        loss = objectives.elbo_loss(model, (x, y), 1, cfg, np.random.default_rng(seed), per_example)
        (g,) = ad.grad(loss, [layer.kernel])
        grads.append(g.data.reshape(-1))
    grads = np.array(grads)
    var = grads.var(axis=0, ddof=1).sum()
    se = var * math.sqrt(2.0 / (seeds - 1))
    return var, se


def test_per_example_sampling_reduces_gradient_variance():
    v_pe, se_pe = _elbo_grad_variance(True)
    v_sh, se_sh = _elbo_grad_variance(False)
    assert v_pe <= v_sh + 3 * math.hypot(se_pe, se_sh)
    assert v_pe < v_sh


def test_mlp_parameters_and_kl():
    rng = np.random.default_rng(12)
    r1, p1 = gaussian_pair(rng, 2, 4)
    mlp = layers.Rank1MLP([layers.Rank1Dense(3, 4, 2, r1, None, p1, None, "tanh", rng),
                           layers.Rank1Dense(4, 2, 2, rng=rng)])
    names = set(mlp.named_parameters())
    assert {"layer0.kernel", "layer0.bias", "layer0.r.loc", "layer0.r.raw_scale", "layer1.kernel"} <= names
    assert mlp.kl().item() == pytest.approx(layers.Rank1Dense(3, 4, 2, r1, None, p1, None).kl().item())
    out = mlp.forward(Tensor(rng.normal(size=(4, 3, 1))), "mean")
    assert out.shape == (4, 2)
    with pytest.raises(ValueError):
        layers.Rank1MLP([layers.Rank1Dense(3, 4, 2), layers.Rank1Dense(4, 2, 1)])
