"""SGD with momentum and an Adam-style adaptive optimizer.

Weight decay is decoupled: ``w <- w * (1 - lr * wd)`` before the gradient
update.
"""

from dataclasses import dataclass

import numpy as np

from vmp.errors import ContractError


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"  # sgd | adaptive
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


class Optimizer:
    def __init__(self, config, lr_scale=None):
        if config.lr <= 0:
            raise ContractError("learning rate must be positive")
        if config.kind not in ("sgd", "adaptive"):
            raise ContractError(f"unknown optimizer kind {config.kind!r}")
        self.config = config
        self.lr_scale = dict(lr_scale or {})
        self.state = {}
        self.t = 0

    def step(self, params, grads):
        """Update ``params`` (name -> array) in place from ``grads``."""
        missing = [k for k in params if k not in grads]
        if missing:
            raise ContractError(f"missing gradients for {sorted(missing)}")
        cfg = self.config
        self.t += 1
        for name in params:
            w, g = params[name], grads[name]
            lr = cfg.lr * self.lr_scale.get(name, 1.0)
            if cfg.weight_decay:
                w *= 1.0 - lr * cfg.weight_decay
            if cfg.kind == "sgd":
                if cfg.momentum:
                    v = self.state.get(name)
                    v = -lr * g if v is None else cfg.momentum * v - lr * g
                    self.state[name] = v
                    w += v
                else:
                    w -= lr * g
            else:
                b1, b2 = cfg.betas
                m, v = self.state.get(name, (np.zeros_like(w), np.zeros_like(w)))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[name] = (m, v)
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                w -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
        return params

    def velocity(self, name):
        return self.state.get(name)
