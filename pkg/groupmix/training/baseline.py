"""
Pixel-wise logistic regression, the negative control for the synthetic task.

A linear model on flattened pixels sees every location independently, so it
cannot compare the two patches and should stay close to chance.
"""
from dataclasses import dataclass
import logging

import numpy as np

from ..core import ops
from ..core.rng import make_rng
from ..core.tensor import Tape, Tensor, no_grad
from ..models.params import Init, ParamSpec, materialize
from .data import SyntheticTask, gen_synthetic
from .losses import accuracy, cross_entropy
from .optim import ScheduleSpec, adamw_step, clip_grad_norm, collect_grads, init_train_state

logger = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    train_accuracy: float
    heldout_accuracy: float
    steps: int


def fit_pixel_baseline(task: SyntheticTask, train_size: int = 4096, heldout_size: int = 2048,
                       steps: int = 1000, batch_size: int = 64, base_lr: float = 1e-2,
                       weight_decay: float = 1e-4, seed: int = 0) -> BaselineResult:
    """
    Train a linear classifier on flattened pixels and report held-out accuracy.

    Uses the same autodiff, AdamW and cosine schedule as the transformer loop.
    """
    images, labels = gen_synthetic(task, train_size, "train")
    test_images, test_labels = gen_synthetic(task, heldout_size, "heldout")
    features = images.data.reshape(train_size, -1)
    test_features = test_images.data.reshape(heldout_size, -1)
    dim = features.shape[1]

    store = materialize([
        ParamSpec("fc.weight", (dim, task.num_classes), Init.TRUNC_NORMAL),
        ParamSpec("fc.bias", (task.num_classes,), Init.ZEROS),
    ], seed)
    state = init_train_state(store, base_lr, weight_decay, ScheduleSpec(total=steps, warmup=0))

    for step in range(1, steps + 1):
        idx = make_rng(seed, "batch", step).choice(train_size, size=batch_size, replace=False)
        store.zero_grad()
        with Tape() as tape:
            logits = ops.linear(Tensor.wrap(features[idx]), store["fc.weight"], store["fc.bias"])
            loss = cross_entropy(logits, labels[idx])
        tape.backward(loss)
        grads, _ = clip_grad_norm(collect_grads(store))
        adamw_step(state, grads, state.lr_at(step))

    with no_grad():
        train_acc = accuracy(ops.linear(Tensor.wrap(features), store["fc.weight"], store["fc.bias"]), labels)
        heldout_acc = accuracy(
            ops.linear(Tensor.wrap(test_features), store["fc.weight"], store["fc.bias"]), test_labels,
        )
    logger.info(f"pixel baseline: train acc {train_acc:.3f}, held-out acc {heldout_acc:.3f}")
    return BaselineResult(train_accuracy=train_acc, heldout_accuracy=heldout_acc, steps=steps)
