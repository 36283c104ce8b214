"""Adam with bias correction, for parameters and for pixel batches."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .nets import ModelParams


class Adam:
    """Standard Adam over a ModelParams collection.

    Moments live in plain arrays keyed by parameter name; the step is
    deterministic given the gradient sequence.  Non-finite gradients
    abort the step before any parameter is touched.
    """

    def __init__(self, params: ModelParams, lr, beta1, beta2, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.entries.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.entries.items()}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params.replace(name, params[name].data - update)

    def state_arrays(self):
        out = {"step": np.array([self.step_count], dtype=np.float64)}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["step"][0])
        for k in self.m:
            self.m[k] = arrays[f"m/{k}"].copy()
            self.v[k] = arrays[f"v/{k}"].copy()


class PixelAdam:
    """Per-sample Adam over a batch of images being synthesized.

    Each sample carries its own step counter so frozen (early-stopped)
    samples behave exactly as if optimized independently.
    """

    def __init__(self, batch_shape, lr, beta1, beta2, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(batch_shape)
        self.v = np.zeros(batch_shape)
        self.t = np.zeros(batch_shape[0], dtype=np.int64)

    def ascend(self, x, g, active):
        """One maximizing step on the active rows; returns the new batch."""
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return x
        self.t[idx] += 1
        gi = g[idx]
        self.m[idx] = self.beta1 * self.m[idx] + (1 - self.beta1) * gi
        self.v[idx] = self.beta2 * self.v[idx] + (1 - self.beta2) * gi * gi
        shape = (-1,) + (1,) * (x.ndim - 1)
        c1 = (1.0 - self.beta1 ** self.t[idx]).reshape(shape)
        c2 = (1.0 - self.beta2 ** self.t[idx]).reshape(shape)
        out = x.copy()
        out[idx] = x[idx] + self.lr * (self.m[idx] / c1) / (np.sqrt(self.v[idx] / c2) + self.eps)
        return out

    def reset_rows(self, idx):
        self.m[idx] = 0.0
        self.v[idx] = 0.0
        self.t[idx] = 0
