"""Heavy tails of the induced weight prior w' = w * r."""

import numpy as np

from rank1bnn import diagnostics

rng = np.random.default_rng(0)
for family in ("point", "gaussian", "cauchy"):
    draws = diagnostics.induced_prior_samples(family, 200_000, rng)
    summary = diagnostics.tail_summary(draws, threshold=5.0)
    print(f"r ~ {family:8s} excess kurtosis {summary['excess_kurtosis']:10.2f}   "
          f"P(|w'| > 5) = {summary['tail_fraction']:.5f}")
