"""Flat-parameter MLPs with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector (layer weights are views into
it), which keeps optimizer state, target-network blending, checkpointing,
and finite-difference checking trivial.  Hidden layers are ReLU; the
optional output squash is tanh for policies that emit actions in [-1, 1].
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class MLP:
    """sizes = [n_in, hidden..., n_out]; flat params in .theta, grads in .grad."""

    def __init__(self, sizes, rng=None, squash: bool = False):
        self.sizes = list(sizes)
        self.squash = squash
        self.shapes = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.shapes.append((a, b))   # weight
            self.shapes.append((b,))     # bias
        self.n_params = int(sum(np.prod(s) for s in self.shapes))
        self.theta = np.zeros(self.n_params)
        self.grad = np.zeros(self.n_params)
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng):
        chunks = []
        n_layers = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.squash and i == n_layers - 1:
                bound = 3e-3                     # small final layer for tanh heads
            else:
                bound = 1.0 / np.sqrt(a)
            chunks.append(rng.uniform(-bound, bound, size=a * b))
            chunks.append(np.zeros(b))
        self.theta = np.concatenate(chunks)
        self.grad = np.zeros_like(self.theta)

    def _views(self, flat):
        views = []
        ofs = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            views.append(flat[ofs:ofs + size].reshape(shape))
            ofs += size
        return views

    def params(self):
        return self._views(self.theta)

    def grads(self):
        return self._views(self.grad)

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self) -> "MLP":
        other = MLP(self.sizes, rng=None, squash=self.squash)
        other.theta = self.theta.copy()
        other.grad = np.zeros_like(self.theta)
        return other

    def forward(self, x):
        return self.forward_cache(x)[0]

    def forward_cache(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"expected input dim {self.sizes[0]}, got {x.shape[1]}")
        views = self.params()
        hs = [x]
        h = x
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            w, b = views[2 * i], views[2 * i + 1]
            z = h @ w + b
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
            elif self.squash:
                h = np.tanh(z)
            else:
                h = z
            hs.append(h)
        return h, hs

    def backward(self, cache, dout, accumulate: bool = True):
        """Backprop dL/dout through the cached forward; returns dL/dx.

        Gradients are written into self.grad (added when ``accumulate``).
        """
        hs = cache
        views = self.params()
        gviews = self.grads()
        if not accumulate:
            self.zero_grad()
        n_layers = len(self.sizes) - 1
        delta = np.asarray(dout, dtype=float)
        if delta.shape != hs[-1].shape:
            raise ShapeMismatch(f"dout shape {delta.shape} != output {hs[-1].shape}")
        for i in reversed(range(n_layers)):
            h_in, h_out = hs[i], hs[i + 1]
            if i == n_layers - 1:
                dz = delta * (1.0 - h_out * h_out) if self.squash else delta
            else:
                dz = delta * (h_out > 0.0)
            gviews[2 * i] += h_in.T @ dz
            gviews[2 * i + 1] += dz.sum(axis=0)
            delta = dz @ views[2 * i].T
        return delta


def soft_update(target: MLP, source: MLP, tau: float):
    """target <- (1 - tau) * target + tau * source, exactly."""
    target.theta = (1.0 - tau) * target.theta + tau * source.theta


class Adam:
    """Adaptive moment estimation over a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)
