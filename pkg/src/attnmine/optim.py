"""AdamW with bias correction and a warmup-then-cosine learning-rate
schedule."""

import math
from typing import Dict, Sequence, Tuple

import numpy as np

from .autodiff import GradientMap, Tensor
from .errors import ConfigError, ShapeError


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                lr_max: float) -> float:
    """Linear 0 -> lr_max over the warmup, then cosine lr_max -> 0."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps < 0 or warmup_steps > total_steps:
        raise ConfigError(f"warmup {warmup_steps} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
               v: np.ndarray, t: int, lr_t: float,
               betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place update of a single parameter array (t counts from 1).

    Weight decay is decoupled: applied directly to the weights, not mixed
    into the gradient moments.
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(
            f"adamw_step shapes disagree: {param.shape}, {grad.shape}, "
            f"{m.shape}, {v.shape}"
        )
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= lr_t * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        param -= lr_t * weight_decay * param


class AdamW:
    """Optimizer over named parameter tensors; owns the moment arrays."""

    def __init__(self, named_params: Sequence[tuple],
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got {betas}")
        pairs = list(named_params)
        self.params: Dict[str, Tensor] = dict(pairs)
        if len(self.params) != len(pairs):
            raise ConfigError("duplicate parameter names")
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: GradientMap, lr_t: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            adamw_step(p.data, grads.grad(p), self.m[name], self.v[name],
                       self.t, lr_t, self.betas, self.eps, self.weight_decay)

    def state_arrays(self):
        """Moment arrays in a stable order, for checkpointing."""
        for name in self.params:
            yield f"adam_m/{name}", self.m[name]
        for name in self.params:
            yield f"adam_v/{name}", self.v[name]

    def load_state(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name][...] = arrays[f"adam_m/{name}"]
            self.v[name][...] = arrays[f"adam_v/{name}"]
