"""Adam optimizer over raw float64 arrays, one instance per parameter group."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction; updates the array in place.

    The step counter advances only when step() is called, so a group that
    is skipped for an iteration (e.g. a masked task's compositional vector)
    keeps consistent bias-correction state.
    """

    def __init__(self, shape, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, data: np.ndarray, grad: np.ndarray) -> None:
        if grad.shape != data.shape:
            raise ValueError(f"Adam.step: grad shape {grad.shape} != param shape {data.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self) -> None:
        """Fresh moments, e.g. after a compositional-vector reset."""
        self.m = np.zeros_like(self.m)
        self.v = np.zeros_like(self.v)
        self.t = 0

    def state_arrays(self) -> dict:
        return {"m": self.m, "v": self.v, "t": np.asarray(float(self.t))}

    def load_state_arrays(self, arrays: dict) -> None:
        self.m = np.asarray(arrays["m"], dtype=np.float64).reshape(self.m.shape)
        self.v = np.asarray(arrays["v"], dtype=np.float64).reshape(self.v.shape)
        self.t = int(round(float(arrays["t"])))
