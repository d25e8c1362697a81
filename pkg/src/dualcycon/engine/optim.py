"""Adam with bias correction."""

import numpy as np

from .tensor import Tensor


class Param:
    """A trainable tensor plus its Adam moment estimates."""

    def __init__(self, tensor: Tensor, name=None):
        if not tensor.requires_grad:
            tensor.requires_grad = True
        self.tensor = tensor
        self.name = name or tensor.name
        self.m = np.zeros_like(tensor.data)
        self.v = np.zeros_like(tensor.data)
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


def adam_step(params, grads=None, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
    """Apply one Adam update to each :class:`Param` in place.

    ``grads`` defaults to the gradients accumulated on the parameters.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self):
        adam_step(self.params, None, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()
