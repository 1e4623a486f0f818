"""AdamW with decoupled weight decay."""
from __future__ import annotations

import math
from typing import Iterable, Tuple

import torch

DEFAULT_LR = 1e-4
DEFAULT_BETAS = (0.5, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 0.01


def adamw_update(param: torch.Tensor, grad: torch.Tensor, exp_avg: torch.Tensor, exp_avg_sq: torch.Tensor,
                 step: int, lr: float, betas: Tuple[float, float], eps: float, weight_decay: float) -> None:
    """One in-place AdamW update of a tensor and its moment buffers; step counts from 1.

    The parameter is scaled by (1 - lr * weight_decay) first, then moved by the bias corrected
    Adam step.
    """
    beta1, beta2 = betas
    if weight_decay != 0:
        param.mul_(1 - lr * weight_decay)
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    bias_correction1 = 1 - beta1 ** step
    bias_correction2 = 1 - beta2 ** step
    denom = (exp_avg_sq.sqrt() / math.sqrt(bias_correction2)).add_(eps)
    param.addcdiv_(exp_avg, denom, value=-lr / bias_correction1)


class AdamW(torch.optim.Optimizer):
    """AdamW optimizer.

    Parameters
    ----------
    params: Iterable
        Parameters or parameter groups
    lr: float
        Learning rate
    betas: Tuple[float, float]
        Decay rates of the first and second moment estimates
    eps: float
        Added to the denominator
    weight_decay: float
        Decoupled decay, applied to the parameter directly
    """

    def __init__(self, params: Iterable, lr: float = DEFAULT_LR, betas: Tuple[float, float] = DEFAULT_BETAS,
                 eps: float = DEFAULT_EPS, weight_decay: float = DEFAULT_WEIGHT_DECAY):
        if lr < 0 or eps < 0 or weight_decay < 0 or not all(0 <= b < 1 for b in betas):
            raise ValueError(f"invalid AdamW hyperparameters lr={lr} betas={betas} eps={eps} wd={weight_decay}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                adamw_update(p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"], group["lr"],
                             group["betas"], group["eps"], group["weight_decay"])
        return loss
