"""Optimizers for full-parameter pretraining and adapter training."""

import numpy as np


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.vdot(g, g))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Scale grads in place so their global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


class AdamW:
    def __init__(self, param_names, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: None for name in param_names}
        self._v = {name: None for name in param_names}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if self._m[name] is None:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= np.asarray(self.lr, dtype=p.dtype) * update.astype(p.dtype, copy=False)


class SGD:
    def __init__(self, param_names, lr, **_ignored):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            p = params[name]
            p -= np.asarray(self.lr, dtype=p.dtype) * g.astype(p.dtype, copy=False)


def make_optimizer(kind: str, param_names, lr, **kwargs):
    if kind == "adamw":
        return AdamW(param_names, lr, **kwargs)
    if kind == "sgd":
        return SGD(param_names, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
