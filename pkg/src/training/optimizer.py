import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: List[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def lr_schedule(epoch: int, cfg) -> float:
    """
    Step schedule: the rate drops by ``lr_drop_factor`` at the start of each drop epoch.

    Args:
        epoch (int): 1-based epoch
        cfg (TrainConfig): Training settings

    Returns:
        float: Learning rate for that epoch
    """
    drops = sum(1 for drop_epoch in cfg.lr_drop_epochs if epoch >= drop_epoch)
    return cfg.lr_initial / (cfg.lr_drop_factor ** drops)


def adam_step(
    params: List[Tensor],
    grads: List[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    cfg,
) -> AdamState:
    """
    One Adam update with bias correction, applied to ``params`` in place.

    A missing gradient counts as zero: the moments still decay.

    Args:
        params (List[Tensor]): Parameters to update
        grads (List[np.ndarray]): Gradients aligned with ``params``
        state (AdamState): Moment estimates and step counter
        lr (float): Learning rate
        cfg (TrainConfig): Supplies adam_beta1, adam_beta2, adam_eps

    Returns:
        AdamState: The same state object, step incremented once

    Raises:
        ShapeMismatch: State or gradients not aligned with params
    """
    if len(params) != len(grads) or len(params) != len(state.m) or len(params) != len(state.v):
        raise ShapeMismatch(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )

    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step

    for i, (param, grad) in enumerate(zip(params, grads)):
        if state.m[i].shape != param.shape:
            raise ShapeMismatch(f"adam_step: state shape {state.m[i].shape} != param shape {param.shape}")
        if grad is None:
            grad = np.zeros_like(param.data)
        elif grad.shape != param.shape:
            raise ShapeMismatch(f"adam_step: grad shape {grad.shape} != param shape {param.shape}")

        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)

    return state


class Adam:
    def __init__(self, params: List[Tensor], cfg):
        """
        Initialize the Adam optimizer over a fixed parameter list.

        Args:
            params (List[Tensor]): Parameters, updated in place
            cfg (TrainConfig): Learning rate schedule and Adam constants
        """
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like(self.params)
        self.lr = cfg.lr_initial
        self.logger = logging.getLogger(__name__)

    def set_epoch(self, epoch: int) -> float:
        self.lr = lr_schedule(epoch, self.cfg)
        return self.lr

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
