"""AdamW with decoupled weight decay and a frozen-parameter gate."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import OptimizerStateError
from .tensor import Tensor


class AdamW:
    """AdamW over a fixed list of parameters.

    Frozen parameters are skipped entirely, so their buffers stay
    bit-identical no matter how many steps run.  Parameters with fewer
    than two dimensions (biases, layer-norm affines) are excluded from
    weight decay, following the usual transformer fine-tuning recipe.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, decay_vectors: bool = False):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_vectors = decay_vectors
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        trainable = [p for p in self.params if not p.frozen]
        for p in trainable:
            if p.grad is None:
                raise OptimizerStateError(f"parameter {p.name or p.shape} has no gradient")
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in trainable:
            key = id(p)
            g = p.grad
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            if self.weight_decay and (self.decay_vectors or p.ndim >= 2):
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (lr / bc1) * m / denom

    def state_size(self) -> int:
        return len(self._m)
