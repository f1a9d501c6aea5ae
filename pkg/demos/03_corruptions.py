"""Robustness on the 5x5 corruption grid, and what extra samples buy."""

import numpy as np

from rank1bnn import data, metrics, trainer
from rank1bnn.cli import corruption_report

config = trainer.load_config("demos/two_moons.cfg", {
    "train_epochs": 40, "kl_annealing_epochs": 26, "lr_decay_epochs": (20, 30, 36)})
t, _, test_set = trainer.run_experiment(config)

x = test_set.features[:1]
for i in data.INTENSITIES:
    noisy = data.corrupt(x, data.CorruptionSpec("gaussian_noise", i), np.random.default_rng(i))
    print(f"gaussian_noise {i}: {x[0].round(3)} -> {noisy[0].round(3)}")

for samples in (1, 25):
    rep = corruption_report(t.model, test_set, data.CORRUPTION_TYPES, data.INTENSITIES, samples, seed=0)
    c_nll, c_acc, c_ece = metrics.corruption_aggregate(rep.corruption)
    print(f"{samples:2d} samples: clean nll {rep.nll:.4f}  cNLL {c_nll:.4f}  cA {c_acc:.3f}  cECE {c_ece:.4f}")
    worst = max(rep.corruption.items(), key=lambda kv: kv[1][0])
    print("    hardest cell:", worst[0], "nll %.3f" % worst[1][0])
