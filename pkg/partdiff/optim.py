import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._typings import SlotsT
from .autodiff import Tensor

__all__ = ["AdamW", "StepDecay", "global_grad_norm"]

logger = logging.getLogger(__name__)


class AdamW:
    """Adaptive moments with weight decay decoupled from the gradient

    Only the parameters named in ``decay`` receive weight decay. Setting
    ``weight_decay`` to 0 gives plain Adam.
    """

    __slots__: SlotsT = [
        "__weakref__",
        "params",
        "lr",
        "betas",
        "eps",
        "weight_decay",
        "decay",
        "_m",
        "_v",
        "_t",
    ]

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay: Optional[Sequence[bool]] = None,
    ) -> None:
        self.params: List[Tensor] = list(params)
        self.lr: float = lr
        self.betas: Tuple[float, float] = betas
        self.eps: float = eps
        self.weight_decay: float = weight_decay
        self.decay: List[bool] = (
            list(decay) if decay is not None else [True] * len(self.params)
        )
        self._m: List[np.ndarray] = [np.zeros_like(p.data) for p in self.params]
        self._v: List[np.ndarray] = [np.zeros_like(p.data) for p in self.params]
        self._t: int = 0

    @property
    def steps_taken(self) -> int:
        return self._t

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            if self.weight_decay and self.decay[i]:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)

    def state_dict(self) -> Dict[str, float]:
        return {"lr": self.lr, "step": float(self._t)}

    def __str__(self) -> str:
        return f"AdamW(lr={self.lr}, betas={self.betas}, weight_decay={self.weight_decay}, params={len(self.params)})"

    def __repr__(self) -> str:
        return self.__str__()


class StepDecay:
    """Multiply the learning rate by ``factor`` every ``every`` epochs"""

    __slots__: SlotsT = ["__weakref__", "optimizer", "base_lr", "factor", "every"]

    def __init__(self, optimizer: AdamW, factor: float = 0.5, every: int = 30) -> None:
        self.optimizer: AdamW = optimizer
        self.base_lr: float = optimizer.lr
        self.factor: float = factor
        self.every: int = max(1, every)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.every)

    def epoch_end(self, epoch: int) -> None:
        """Set the learning rate for the epoch after ``epoch`` (0 based)"""
        lr = self.lr_at(epoch + 1)
        if lr != self.optimizer.lr:
            logger.info("learning rate %.3e -> %.3e", self.optimizer.lr, lr)
        self.optimizer.lr = lr


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
