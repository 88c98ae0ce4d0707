# src/optim.py
import numpy as np


class Adam:
    """Per-parameter adaptive steps with bias-corrected first and second moments."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0.0:
            raise ValueError(f"Invalid learning rate: {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, ascent=False):
        """Descend along .grad (or ascend if `ascent`); parameters without a grad are skipped."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        sign = 1.0 if ascent else -1.0
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target, online, tau):
    """target <- tau * online + (1 - tau) * target, parameter by parameter."""
    for t, o in zip(target.parameters(), online.parameters()):
        t.data[...] = tau * o.data + (1.0 - tau) * t.data
