"""First-order optimizers acting on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SGD:
    """Plain gradient descent with step ``lr / (1 + decay * m)`` at step m."""

    lr: float = 0.1
    decay: float = 0.0
    t: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        eta = self.lr / (1.0 + self.decay * self.t)
        self.t += 1
        return theta - eta * grad

    def state_dict(self) -> dict:
        return {"t": self.t}


@dataclass
class Adam:
    """Adam with an optional ``lr / (1 + decay * m)`` step-size schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.0
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        eta = self.lr / (1.0 + self.decay * (self.t - 1))
        return theta - eta * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


class TrainingAborted(RuntimeError):
    """Raised when a training loop meets a non-finite loss.

    ``state`` is the training state at the failing iteration and
    ``dump_path`` the checkpoint written for it (``None`` if no dump
    directory was configured).
    """

    def __init__(self, message: str, state=None, dump_path=None):
        super().__init__(message)
        self.state = state
        self.dump_path = dump_path


def make_optimizer(name: str, lr: float, **kw):
    if name == "adam":
        return Adam(lr=lr, **kw)
    if name == "sgd":
        return SGD(lr=lr, **kw)
    raise ValueError(f"unknown optimizer {name!r}")
