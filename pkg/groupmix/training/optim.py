"""
AdamW with decoupled weight decay, global-norm clipping and a warm-up
cosine schedule.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Optional, Tuple
import logging
import math

import numpy as np

from ..core.errors import ContractError, DivergenceError
from ..models.params import ParamStore

logger = logging.getLogger(__name__)

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
DEFAULT_CLIP = 5.0


@dataclass
class ScheduleSpec:
    total: int
    warmup: int = 0
    floor_lr: float = 0.0


@dataclass
class TrainState:
    """
    Optimizer state over a ParamStore.

    ``m`` and ``v`` mirror the parameter shapes. Parameters named in
    ``no_decay`` skip the weight-decay term.
    """
    params: ParamStore
    base_lr: float
    weight_decay: float
    schedule: ScheduleSpec
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    betas: Tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    no_decay: FrozenSet[str] = frozenset()

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.schedule.total, self.schedule.warmup, self.base_lr, self.schedule.floor_lr)


def init_train_state(params: ParamStore, base_lr: float = 1e-3, weight_decay: float = 0.05,
                     schedule: Optional[ScheduleSpec] = None, decay_min_ndim: int = 2,
                     betas: Tuple[float, float] = DEFAULT_BETAS, eps: float = DEFAULT_EPS) -> TrainState:
    """
    Fresh optimizer state with zero moments.

    Tensors with fewer than ``decay_min_ndim`` axes (biases, norm affines)
    are excluded from weight decay.
    """
    return TrainState(
        params=params,
        base_lr=base_lr,
        weight_decay=weight_decay,
        schedule=schedule or ScheduleSpec(total=1),
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
        betas=betas,
        eps=eps,
        no_decay=frozenset(name for name, t in params.items() if t.ndim < decay_min_ndim),
    )


def collect_grads(params: ParamStore) -> Dict[str, np.ndarray]:
    """Gradients of every parameter; tensors the loss never reached get zeros."""
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float = DEFAULT_CLIP) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        (clipped gradients, norm before clipping)
    """
    total = global_norm(grads)
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        return {name: g * factor for name, g in grads.items()}, total
    return dict(grads), total


def adamw_step(state: TrainState, grads: Mapping[str, np.ndarray], lr_t: float) -> TrainState:
    """
    One AdamW update, applied to the parameters in place.

    Decay is decoupled: parameters shrink by (1 - lr·wd) before the
    bias-corrected Adam step.

    Raises:
        DivergenceError: If a gradient is non-finite, naming the parameter
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for {name}", step=state.step + 1, path=name)

    beta1, beta2 = state.betas
    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    for name, tensor in state.params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise ContractError(f"gradient for {name} has shape {grad.shape}, expected {tensor.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if state.weight_decay and name not in state.no_decay:
            tensor.data *= 1.0 - lr_t * state.weight_decay
        tensor.data -= lr_t * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    state.step = step
    return state


def cosine_lr(step: int, total: int, warmup: int, base_lr: float, floor_lr: float = 0.0) -> float:
    """
    Linear warm-up to ``base_lr`` then cosine decay to ``floor_lr``.

    The ramp gives 0 at step 0 and base·step/warmup afterwards; training
    loops count steps from 1, so their first update uses base/warmup.

    Raises:
        ContractError: If step lies outside [0, total] or warmup >= total
    """
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if not 0 <= warmup < total:
        raise ContractError(f"warmup {warmup} must lie in [0, {total})")
    if step < warmup:
        return base_lr * step / warmup
    t = (step - warmup) / (total - warmup)
    return floor_lr + (base_lr - floor_lr) * (1.0 + math.cos(math.pi * t)) / 2.0
