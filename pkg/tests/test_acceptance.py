"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line (also collected into the
terminal summary) before asserting.
"""

import math
import time

import numpy as np
import pytest

from rank1bnn import data, diagnostics, layers, metrics, objectives, theorem, trainer
from rank1bnn import distributions as dist
from rank1bnn.autodiff import Tensor
from rank1bnn.cli import corruption_report
from rank1bnn.distributions import MixtureDistribution
from rank1bnn.trainer import TrainConfig, Trainer

from baseline_mlp import BaselineMLP
from conftest import ACCEPTANCE_LINES
from oracles import draw_like_layer, explicit_conv, explicit_dense, explicit_lstm, gaussian_pair

SMOKE = TrainConfig(ensemble_size=4, train_epochs=200, kl_annealing_epochs=133,
                    lr_decay_epochs=(100, 150, 180), hidden_units=(64, 64), num_examples=2000,
                    dataset="two_moons", noise=0.1, seed=0)


def report(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


@pytest.fixture(scope="module")
def smoke():
    start = time.perf_counter()
    t, result, test_set = trainer.run_experiment(SMOKE)
    return t, result, test_set, time.perf_counter() - start


def test_criterion_01_vectorization_identity():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = 2
        r, rp = gaussian_pair(rng, k, 3)
        s, sp = gaussian_pair(rng, k, 4)
        dense = layers.Rank1Dense(4, 3, k, r, s, rp, sp, "tanh", rng, bias=rng.normal(size=3))
        x = rng.normal(size=(6, 4))
        out = dense.forward(Tensor(x), "sample", np.random.default_rng(seed + 1000)).data
        sd, rd = draw_like_layer([dense.s, dense.r], 6, seed + 1000)
        worst = max(worst, np.max(np.abs(out - explicit_dense(dense.kernel.data, dense.bias.data,
                                                                 rd, sd, x, "tanh"))))

        r, rp = gaussian_pair(rng, k, 3)
        s, sp = gaussian_pair(rng, k, 2)
        conv = layers.Rank1Conv2D(2, 3, 3, k, 1 + seed % 2, "same" if seed % 3 else "valid",
                                  r, s, rp, sp, rng=rng, bias=rng.normal(size=3))
        xi = rng.normal(size=(4, 5, 5, 2))
        out = conv.forward(Tensor(xi), "sample", np.random.default_rng(seed + 2000)).data
        sc, rc = draw_like_layer([conv.s, conv.r], 4, seed + 2000)
        worst = max(worst, np.max(np.abs(out - explicit_conv(conv.kernel.data, conv.bias.data, rc, sc, xi,
                                                               conv.stride, conv.padding))))

        dims = {"r_input": 8, "s_input": 3, "r_recurrent": 8, "s_recurrent": 2}
        cell = layers.Rank1LSTMCell(3, 2, k, {n: gaussian_pair(rng, k, d) for n, d in dims.items()}, rng=rng)
        xs = rng.normal(size=(4, 3, 3))
        out, _ = cell.forward(Tensor(xs), "sample", np.random.default_rng(seed + 3000))
        drawn = draw_like_layer([cell.s_input, cell.r_input, cell.s_recurrent, cell.r_recurrent], 4,
                                seed + 3000)
        worst = max(worst, np.max(np.abs(out.data - explicit_lstm(
            cell.input_kernel.data, cell.recurrent_kernel.data, cell.bias.data, drawn, xs))))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-12 and elapsed < 10, f"max abs diff {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_gradcheck_twenty_seeds():
    start = time.perf_counter()
    records = diagnostics.run_gradcheck(range(20), h=1e-5, rtol=1e-4)
    elapsed = time.perf_counter() - start
    failed = [r for r in records if not r["passed"]]
    worst = max(r["max_rel_error"] for r in records)
    names = {r["check"] for r in records}
    report(2, not failed and elapsed < 60 and len(names) >= 40,
           f"{len(records)} checks over {len(names)} ops/layers, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_03_kl_oracles():
    start = time.perf_counter()
    records = diagnostics.run_kl_check(num_params=10, num_samples=100_000, seed=0)
    g = dist.kl_divergence(dist.ScaleDistribution.create(dist.GAUSSIAN, [1.0], [1.0]),
                           dist.ScaleDistribution.create(dist.GAUSSIAN, [0.0], [1.0])).item()
    c = dist.kl_divergence(dist.ScaleDistribution.create(dist.CAUCHY, [1.0], [1.0]),
                           dist.ScaleDistribution.create(dist.CAUCHY, [0.0], [1.0])).item()
    elapsed = time.perf_counter() - start
    families = {r["family"] for r in records}
    ok = (all(r["passed"] for r in records) and len(records) == 30 and len(families) == 3
          and abs(g - 0.5) <= 1e-9 and abs(c - math.log(1.25)) <= 1e-9 and elapsed < 30)
    report(3, ok, f"{sum(r['passed'] for r in records)}/30 within 3 SE, Gaussian {g:.12f}, "
                  f"Cauchy {c:.12f}, {elapsed:.1f}s")


def test_criterion_04_jensen_and_marginal_equivalence():
    rng = np.random.default_rng(4)
    worst_gap, worst_eq = -math.inf, 0.0
    for _ in range(10_000):
        m, b, c = rng.integers(1, 6), rng.integers(1, 5), rng.integers(2, 6)
        logits = Tensor(rng.normal(scale=rng.uniform(0.1, 10), size=(m, b, c)))
        labels = rng.integers(0, c, size=b)
        mix = objectives.nll("mixture", logits, labels).item()
        avg = objectives.nll("average", logits, labels).item()
        probs = objectives.nll("marginal_probs", logits, labels).item()
        worst_gap = max(worst_gap, mix - avg)
        worst_eq = max(worst_eq, abs(probs - mix))
    report(4, worst_gap <= 1e-12 and worst_eq <= 1e-12,
           f"max(mixture - average) {worst_gap:.2e}, max |marginal_probs - mixture| {worst_eq:.2e}")


def test_criterion_05_theorem_grid():
    start = time.perf_counter()
    worst, control_min = 0.0, math.inf
    for width in (2, 3, 4, 8):
        for depth in (1, 2, 3):
            rep = theorem.verify(width, depth, num_trials=10, num_points=5, seed=width * 10 + depth)
            worst = max(worst, rep["max_rel_discrepancy"])
            control_min = min(control_min, rep["negative_control"]["rel_discrepancy"])
    elapsed = time.perf_counter() - start
    report(5, worst < 1e-6 and control_min > 0.5 and elapsed < 300,
           f"max rel discrepancy {worst:.2e}, min negative control {control_min:.3f}, {elapsed:.1f}s")


def test_criterion_06_special_cases():
    cfg = TrainConfig(ensemble_size=1, alpha_initializer="ones", alpha_regularizer="none",
                      gamma_initializer="ones", gamma_regularizer="none", train_epochs=6,
                      kl_annealing_epochs=3, lr_decay_epochs=(3,), hidden_units=(16, 16),
                      batch_size=32, l2=1e-3)
    ds = data.synthetic("two_moons", 400, 0.1, seed=1)
    train_set = ds.subset(slice(0, 320))
    model = trainer.build_model(cfg, 2, 2, np.random.default_rng(5))
    Trainer(model, train_set, cfg, ds.subset(slice(320, None)), np.random.default_rng(9)).fit()
    twin = BaselineMLP([2, 16, 16, 2], "relu", np.random.default_rng(5))
    twin.train(train_set.features, train_set.labels, 6, 32, lambda e: trainer.lr_schedule(e, cfg),
               0.9, 1e-3, np.random.default_rng(9))
    twin_ok = all(np.array_equal(l.kernel.data, w) and np.array_equal(l.bias.data, b)
                  for l, w, b in zip(model.layers, twin.kernels, twin.biases))

    rng = np.random.default_rng(6)
    k, b = 4, 5
    r, s = rng.normal(size=(k, 7)), rng.normal(size=(k, 3))
    layer = layers.Rank1Dense(3, 7, k, MixtureDistribution.create(dist.POINT, r),
                              MixtureDistribution.create(dist.POINT, s), rng=rng, bias=rng.normal(size=7))
    x = rng.normal(size=(b, 3))
    out = layer.forward(Tensor(data.duplicate_batch(x, k)), "sample", rng).data
    # BatchEnsemble member k: shared W times the rank-1 fast weight r_k s_k^T
    be_ok = all(np.array_equal(out[i * b:(i + 1) * b],
                               ((x * s[i]) @ layer.kernel.data.T) * r[i] + layer.bias.data)
                for i in range(k))
    members = [x @ (layer.kernel.data * np.outer(r[i], s[i])).T + layer.bias.data for i in range(k)]
    be_close = max(np.max(np.abs(out[i * b:(i + 1) * b] - members[i])) for i in range(k))
    report(6, twin_ok and be_ok and be_close < 1e-12,
           f"twin bit-exact {twin_ok}, BatchEnsemble exact {be_ok}, vs materialized {be_close:.1e}")


def test_criterion_07_smoke_run(smoke):
    t, _, test_set, elapsed = smoke
    lp = trainer.predict_log_probs(t.model, test_set.features, 1, np.random.default_rng(7))
    rep = metrics.evaluate(lp, test_set.labels)
    avg = metrics.average_nll(lp, test_set.labels)
    ok = rep.accuracy >= 0.95 and rep.ece <= 0.05 and rep.nll <= avg and elapsed < 180
    report(7, ok, f"accuracy {rep.accuracy:.4f}, ECE {rep.ece:.4f}, mixture NLL {rep.nll:.5f} <= "
                  f"average NLL {avg:.5f}, train {elapsed:.0f}s")


def test_criterion_08_more_eval_samples_lower_corrupted_nll(smoke):
    t, _, test_set, _ = smoke
    one, many = [], []
    for seed in range(5):
        for samples, sink in ((1, one), (25, many)):
            rep = corruption_report(t.model, test_set, data.CORRUPTION_TYPES, data.INTENSITIES,
                                    samples, seed)
            sink.append(metrics.corruption_aggregate(rep.corruption)[0])
    med_one, med_many = float(np.median(one)), float(np.median(many))
    report(8, med_many <= med_one, f"median cNLL 25 samples {med_many:.4f} vs 1 sample {med_one:.4f}")


def test_criterion_09_dropout_parameterized_init():
    got = {}
    for rate in (0.5, 0.1):
        cfg = TrainConfig(dropout_rate=rate, hidden_units=(8,))
        model = trainer.build_model(cfg, 2, 2, np.random.default_rng(0))
        got[rate] = np.concatenate([p.posterior.scale.data.reshape(-1)
                                    for layer in model.layers for p in (layer.r, layer.s)])
    err_half = np.max(np.abs(got[0.5] - 1.0))
    err_tenth = np.max(np.abs(got[0.1] - 0.3333))
    report(9, err_half <= 1e-12 and err_tenth <= 1e-4,
           f"rate 0.5 max err {err_half:.1e}, rate 0.1 max err vs 0.3333 {err_tenth:.1e}")


def test_criterion_10_diversity_fixtures():
    same = metrics.diversity(np.array([[0, 1, 2, 1], [0, 1, 2, 1]]), 0.5)
    two = metrics.diversity(np.array([[0, 1, 2, 3], [0, 1, 0, 0]]), 0.5)
    three = metrics.diversity(np.array([[0, 1, 2], [1, 2, 0], [2, 0, 1]]), 0.25)
    ok = same == 0.0 and two == 1.0 and three == 1.0 / 0.75
    report(10, ok, f"identical {same}, two-member {two}, three-member {three:.4f}")


def test_criterion_11_induced_prior_tails():
    rng = np.random.default_rng(11)
    gauss = diagnostics.tail_summary(diagnostics.induced_prior_samples(dist.GAUSSIAN, 1_000_000, rng))
    cauchy = diagnostics.tail_summary(diagnostics.induced_prior_samples(dist.CAUCHY, 1_000_000, rng))
    diff = cauchy["tail_fraction"] - gauss["tail_fraction"]
    se = math.hypot(cauchy["tail_std_error"], gauss["tail_std_error"])
    report(11, gauss["excess_kurtosis"] > 0 and diff > 3 * se,
           f"Gaussian-r excess kurtosis {gauss['excess_kurtosis']:.3f}, P(|w'|>5) Cauchy "
           f"{cauchy['tail_fraction']:.5f} vs Gaussian {gauss['tail_fraction']:.5f} (diff {diff / se:.1f} SE)")
