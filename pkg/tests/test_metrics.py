import json
import math

import numpy as np
import pytest

from rank1bnn import metrics
from rank1bnn.metrics import MetricsReport, corruption_aggregate, diversity, ece


def test_ece_confident_and_correct_is_zero():
    probs = np.eye(3)[[0, 2, 1, 1]]
    assert ece(probs, [0, 2, 1, 1]) == 0.0


def test_ece_two_prediction_hand_example():
    probs = np.array([[0.8, 0.2], [0.6, 0.4]])
    assert ece(probs, [0, 1], num_bins=15) == pytest.approx(0.4, abs=1e-12)


def test_ece_single_bin_is_gap_of_means():
    probs = np.array([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]])
    labels = [0, 1, 1]
    conf = np.array([0.9, 0.7, 0.8])
    assert ece(probs, labels, num_bins=1) == pytest.approx(abs(2 / 3 - conf.mean()), abs=1e-12)
    with pytest.raises(ValueError):
        ece(probs, labels, num_bins=0)


def test_ece_of_calibrated_generator_is_small():
    rng = np.random.default_rng(0)
    n = 100_000
    conf = rng.uniform(0.5, 1.0, size=n)
    labels = np.where(rng.uniform(size=n) < conf, 0, 1)
    probs = np.stack([conf, 1 - conf], axis=1)
    assert ece(probs, labels) < 0.01


def test_ece_permutation_and_duplication_invariant():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(200, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    labels = rng.integers(0, 4, size=200)
    base = ece(probs, labels)
    perm = rng.permutation(200)
    assert ece(probs[perm], labels[perm]) == pytest.approx(base, abs=1e-12)
    assert ece(np.concatenate([probs] * 3), np.concatenate([labels] * 3)) == pytest.approx(base, abs=1e-12)


def test_diversity_examples():
    same = np.array([[0, 1, 2, 1], [0, 1, 2, 1]])
    assert diversity(same, 0.5) == 0.0
    two = np.array([[0, 1, 2, 3], [0, 1, 0, 0]])
    assert diversity(two, 0.5) == pytest.approx(1.0, abs=1e-12)
    distinct = np.array([[0, 1, 2], [1, 2, 0], [2, 0, 1]])
    assert diversity(distinct, 0.25) == pytest.approx(1 / 0.75, abs=1e-12)


def test_diversity_symmetric_and_reorder_invariant():
    rng = np.random.default_rng(2)
    preds = rng.integers(0, 3, size=(5, 40))
    base = diversity(preds, 0.6)
    assert diversity(preds[::-1], 0.6) == pytest.approx(base, abs=1e-15)
    assert diversity(preds[rng.permutation(5)], 0.6) == pytest.approx(base, abs=1e-15)
    assert diversity(preds[[1, 0]], 0.6) == diversity(preds[[0, 1]], 0.6)


def test_diversity_errors():
    with pytest.raises(ValueError):
        diversity(np.zeros((2, 3)), 1.0)
    with pytest.raises(ValueError):
        diversity(np.zeros((1, 3)), 0.5)


def test_mixture_and_average_nll():
    lp = np.log(np.array([[[0.8, 0.2]], [[0.6, 0.4]]]))
    assert metrics.mixture_nll(lp, [0]) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert metrics.average_nll(lp, [0]) == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2, abs=1e-12)


def test_evaluate_report():
    lp = np.log(np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.6, 0.4], [0.6, 0.4]]]))
    rep = metrics.evaluate(lp, [0, 0], epoch=3)
    assert rep.accuracy == 0.5
    assert 0 <= rep.ece <= 1
    assert rep.diversity == pytest.approx(0.5 / 0.5)
    assert rep.nll == pytest.approx(-(math.log(0.7) + math.log(0.45)) / 2, abs=1e-12)
    assert rep.epoch == 3


def test_corruption_aggregate_examples():
    single = {("gaussian_noise", 1): MetricsReport(0.7, 0.9, 0.05)}
    assert corruption_aggregate(single) == (0.7, 0.9, 0.05)
    two = {("a", 1): (1.0, 0.5, 0.1), ("a", 2): (3.0, 0.7, 0.3)}
    n, a, e = corruption_aggregate(two)
    assert n == 2.0 and a == pytest.approx(0.6) and e == pytest.approx(0.2)


def test_corruption_aggregate_full_grid_matches_flat_mean():
    rng = np.random.default_rng(3)
    types = [f"type{i}" for i in range(15)]
    grid = {(t, i): tuple(rng.uniform(size=3)) for t in types for i in range(1, 6)}
    flat = np.array(list(grid.values()))
    expected = [sum(flat[:, j]) / len(flat) for j in range(3)]
    got = corruption_aggregate(grid)
    assert np.allclose(got, expected, rtol=0, atol=1e-15)


def test_corruption_aggregate_missing_cell():
    grid = {("a", 1): (1.0, 0.5, 0.1), ("a", 2): (3.0, 0.7, 0.3), ("b", 1): (1.0, 0.5, 0.1)}
    with pytest.raises(KeyError, match=r"\('b', 2\)"):
        corruption_aggregate(grid)
    with pytest.raises(ValueError):
        corruption_aggregate({})


def test_jsonl_records_have_fixed_keys():
    rep = MetricsReport(0.5, 0.8, 0.02, diversity=0.3,
                        corruption={("gaussian_noise", 2): (0.9, 0.6, 0.1)})
    lines = rep.to_jsonl(seed=4).splitlines()
    assert len(lines) == 2
    clean, cell = (json.loads(line) for line in lines)
    assert {"nll", "accuracy", "ece", "diversity", "seed"} <= clean.keys()
    assert cell["corruption_type"] == "gaussian_noise" and cell["intensity"] == 2
    assert {"nll", "accuracy", "ece"} <= cell.keys()
