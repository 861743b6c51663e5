"""Adam with coupled L2 weight decay, and a reduce-on-plateau learning-rate rule."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a name -> Tensor parameter mapping.

    Weight decay is coupled: the gradient of ``weight_decay * ||theta||^2``
    (i.e. ``2 * weight_decay * theta``) is added before the moment updates, so
    the optimised objective carries the squared Frobenius penalty exactly.
    Moments and step counts are kept per parameter so that a subset of
    parameters can be stepped on its own.
    """

    def __init__(self, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = {k: 0 for k in params}
        self.step_count = 0

    def step(self, grads):
        """Apply one update. ``grads`` maps parameter names to gradient arrays."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter {name!r} {self.params[name].shape}"
                )
        b1, b2 = self.betas
        self.step_count += 1
        for name, g in grads.items():
            p = self.params[name]
            if self.weight_decay:
                g = g + 2.0 * self.weight_decay * p.value
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
            out[f"adam.t.{k}"] = np.array(self.t[k])
        return out

    def load_state_arrays(self, arrays, step_count):
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])
            self.t[k] = int(arrays[f"adam.t.{k}"])
        self.step_count = step_count


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    ``mode='max'`` tracks a metric to maximise (validation recall), ``'min'`` a loss.
    The rate never drops below ``floor``.
    """

    def __init__(self, lr, patience=20, factor=0.5, floor=1e-5, mode="max"):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.mode = mode
        self.best = None
        self.bad_epochs = 0

    def _improved(self, value):
        if self.best is None:
            return True
        return value > self.best if self.mode == "max" else value < self.best

    def step(self, value):
        if self._improved(value):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr


def plateau_lr(history, lr, patience=20, factor=0.5, floor=1e-5, mode="min"):
    """Learning rate after replaying ``history`` through a :class:`PlateauScheduler`."""
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    sched = PlateauScheduler(lr, patience=patience, factor=factor, floor=floor, mode=mode)
    for value in history:
        sched.step(value)
    return sched.lr
