"""A plain numpy MLP classifier with hand-written backprop and SGD momentum.

No tensors, no tape, no rank-1 factors: the reference a K=1 point-mass
rank-1 network must reproduce bit for bit. The arithmetic is written in the
order a generic reverse-mode engine produces it (log-softmax through a
shifted logsumexp, transposed-kernel matmuls), since float addition order
decides the last bit.
"""

from __future__ import annotations

import numpy as np


class BaselineMLP:
    def __init__(self, sizes, activation, init_rng):
        self.kernels, self.biases = [], []
        for d, m in zip(sizes[:-1], sizes[1:]):
            kernel_rng = np.random.default_rng(init_rng.integers(2**63))
            self.kernels.append(kernel_rng.normal(0.0, np.sqrt(2.0 / d), size=(m, d)))
            self.biases.append(np.zeros(m))
        self.activation = activation

    def forward(self, x):
        cache = []
        h = x
        last = len(self.kernels) - 1
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            pre = h @ w.T + b
            cache.append((h, pre))
            if i < last:
                if self.activation == "relu":
                    h = pre * (pre > 0).astype(np.float64)
                else:
                    h = np.tanh(pre)
            else:
                h = pre
        return h, cache

    def loss_and_grads(self, x, y, l2):
        logits, cache = self.forward(x)
        n, c = logits.shape
        onehot = np.zeros((n, c))
        onehot[np.arange(n), y] = 1.0
        shift = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - shift)
        s = e.sum(axis=1, keepdims=True)
        lse = np.log(s) + shift
        nll = -((((logits - lse) * onehot).sum(axis=1)).sum() * (1.0 / n))
        penalty = 0.0
        for w in self.kernels:
            penalty = penalty + (w * w).sum()
        loss = nll + penalty * l2

        g_row = -1.0 * (1.0 / n)
        g_lsm = g_row * onehot
        g_lse = (-g_lsm).sum(axis=1, keepdims=True)
        g = g_lsm + (g_lse / s) * e
        grads_w, grads_b = [None] * len(self.kernels), [None] * len(self.kernels)
        for i in reversed(range(len(self.kernels))):
            h, pre = cache[i]
            if i < len(self.kernels) - 1:
                if self.activation == "relu":
                    g = g * (pre > 0).astype(np.float64)
                else:
                    g = g * (1.0 - np.tanh(pre) * np.tanh(pre))
            grads_b[i] = g.sum(axis=0, keepdims=True).reshape(-1)
            grads_w[i] = (h.T @ g).T + l2 * (self.kernels[i] * 2.0)
            g = g @ self.kernels[i]
        return loss, grads_w, grads_b

    def train(self, x, y, epochs, batch_size, lr_fn, momentum, l2, rng):
        params = self.kernels + self.biases
        velocity = [np.zeros_like(p) for p in params]
        for epoch in range(epochs):
            lr = lr_fn(epoch)
            perm = rng.permutation(len(y))
            for start in range(0, len(y), batch_size):
                idx = perm[start:start + batch_size]
                _, gw, gb = self.loss_and_grads(x[idx], y[idx], l2)
                for j, grad in enumerate(gw + gb):
                    velocity[j] = momentum * velocity[j] + grad
                    params[j] -= lr * velocity[j]
        return self
