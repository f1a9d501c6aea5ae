"""A rank-1 dense layer, three ways.

Each example gets its own draw of r and s, and the layer output equals
applying the materialized kernel W o r s^T to that example. With point-mass
factors the same layer is a BatchEnsemble.
"""

import numpy as np

from rank1bnn import distributions as dist
from rank1bnn import layers
from rank1bnn.autodiff import Tensor
from rank1bnn.data import duplicate_batch
from rank1bnn.distributions import MixtureDistribution

rng = np.random.default_rng(0)
K, B = 2, 3

r_post = MixtureDistribution.create(dist.GAUSSIAN, rng.normal(1, 0.5, (K, 4)), np.full((K, 4), 0.3), trainable=True)
s_post = MixtureDistribution.create(dist.GAUSSIAN, rng.normal(1, 0.5, (K, 5)), np.full((K, 5), 0.3), trainable=True)
prior_r = MixtureDistribution.create(dist.GAUSSIAN, np.ones((K, 4)), np.full((K, 4), 0.1))
prior_s = MixtureDistribution.create(dist.GAUSSIAN, np.ones((K, 5)), np.full((K, 5), 0.1))
layer = layers.Rank1Dense(5, 4, K, r_post, s_post, prior_r, prior_s, rng=rng)

x = rng.normal(size=(B, 5))
xd = duplicate_batch(x, K)          # rows [k*B, (k+1)*B) go to component k
out = layer.forward(Tensor(xd), "sample", np.random.default_rng(1)).data
print("vectorized output shape:", out.shape)

# redraw the same factors (s first, then r) and materialize each kernel
replay = np.random.default_rng(1)
idx = layers.component_indices(len(xd), K)
s = dist.sample(s_post, replay, idx).data
r = dist.sample(r_post, replay, idx).data
explicit = np.stack([(layer.kernel.data * np.outer(r[i], s[i])) @ xd[i] for i in range(len(xd))])
print("max |vectorized - explicit|:", np.abs(out - explicit).max())
print("KL(posterior || prior) summed over components:", layer.kl().item())

# point masses: the BatchEnsemble special case
fast_r, fast_s = rng.normal(size=(K, 4)), rng.normal(size=(K, 5))
be = layers.Rank1Dense(5, 4, K, MixtureDistribution.create(dist.POINT, fast_r),
                       MixtureDistribution.create(dist.POINT, fast_s), rng=rng)
be_out = be.forward(Tensor(xd), "sample", rng).data
member1 = x @ (be.kernel.data * np.outer(fast_r[1], fast_s[1])).T
print("BatchEnsemble member 1 matches:", np.allclose(be_out[B:], member1, atol=1e-12))
