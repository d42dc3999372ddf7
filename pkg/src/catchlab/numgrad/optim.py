"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Standard AdamW (beta1=0.9, beta2=0.999, eps=1e-8, decay default 0.01).

    Maximizing callers negate their objective before backward; step() always
    descends along .grad.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def state_arrays(self):
        """Flat view of optimizer state for checkpointing."""
        out = {"t": np.array([float(self._t)])}
        for i, (m, v) in enumerate(zip(self._m, self._v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays):
        self._t = int(arrays["t"][0])
        for i in range(len(self.params)):
            self._m[i][...] = arrays[f"m{i}"]
            self._v[i][...] = arrays[f"v{i}"]
