"""
AdamW with per-group learning rates, linear warmup/decay and global-norm clipping.

Usage:
    optimizer = AdamW(model.params, [ParamGroup(encoder_names, 5e-5), ParamGroup(added_names, 1e-4)])
    norm = clip_grad_norm(model.params, max_norm=1.0)
    optimizer.step(linear_warmup_decay(step, warmup_steps, total_steps))
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from numerics import ParameterSet


@dataclass
class ParamGroup:
    names: List[str]
    lr: float


class AdamW:
    """Adam with decoupled weight decay; moments are kept per parameter name."""

    def __init__(self, params: ParameterSet, groups: Sequence[ParamGroup],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6, weight_decay: float = 0.0):
        assigned = [name for group in groups for name in group.names]
        if len(set(assigned)) != len(assigned):
            raise ValueError("A parameter belongs to more than one group")
        unknown = set(assigned) - set(params.names())
        if unknown:
            raise KeyError(f"Unknown parameters in optimizer groups: {sorted(unknown)}")
        self.params = params
        self.groups = list(groups)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

        # Moment estimates
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(params[name].values) for name in assigned}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(params[name].values) for name in assigned}

    def lr_of(self, name: str) -> float:
        for group in self.groups:
            if name in group.names:
                return group.lr
        raise KeyError(name)

    def step(self, lr_scale: float = 1.0) -> None:
        """Apply one update using the parameters' current gradients."""
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for group in self.groups:
            lr = group.lr * lr_scale
            for name in group.names:
                param = self.params[name]
                grad = param.grad
                self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
                self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
                m_hat = self.m[name] / correction1
                v_hat = self.v[name] / correction2
                if self.weight_decay:
                    param.values = param.values - lr * self.weight_decay * param.values
                param.values = param.values - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def linear_warmup_decay(step: int, warmup_steps: int, total_steps: int) -> float:
    """
    Learning-rate multiplier for update `step` (0-based): rises linearly over
    warmup_steps, then falls linearly to 0 at total_steps.
    """
    if step < warmup_steps:
        return float(step + 1) / float(max(1, warmup_steps))
    return max(0.0, float(total_steps - step) / float(max(1, total_steps - warmup_steps)))


def global_grad_norm(params: ParameterSet) -> float:
    return math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params.items()))


def clip_grad_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for _, tensor in params.items():
            tensor.grad = tensor.grad * scale
    return norm
