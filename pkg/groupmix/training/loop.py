"""
Desk-scale training loop on the synthetic group-pattern task.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union
import io
import csv
import logging
import math

import numpy as np

from ..core.errors import ContractError, DivergenceError
from ..core.rng import make_rng
from ..core.tensor import Tape, Tensor, no_grad
from ..models.backbone import EVAL, TRAIN, GroupMixFormer, build_model
from ..models.configs import ModelConfig
from .. import weights
from .data import SyntheticTask, gen_synthetic
from .losses import correct, cross_entropy
from .optim import (
    DEFAULT_CLIP,
    ScheduleSpec,
    TrainState,
    adamw_step,
    clip_grad_norm,
    collect_grads,
    init_train_state,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "lr", "loss", "accuracy")


@dataclass
class TrainOptions:
    steps: int = 2000
    batch_size: int = 32
    train_size: int = 4096
    base_lr: float = 1e-3
    floor_lr: float = 1e-5
    warmup: int = 100
    weight_decay: float = 0.05
    clip_norm: float = DEFAULT_CLIP
    log_every: int = 10
    stop_after: Optional[int] = None


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    accuracy: float

    def to_csv_fields(self):
        return (self.step, repr(self.lr), repr(self.loss), repr(self.accuracy))


@dataclass
class TrainResult:
    model: GroupMixFormer
    state: TrainState
    history: List[MetricsRow] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy if self.history else float("nan")

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.history)


def metrics_to_csv(rows: List[MetricsRow], header: bool = True) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if header:
        writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.to_csv_fields())
    return buffer.getvalue()


def batch_indices(seed: int, step: int, train_size: int, batch_size: int) -> np.ndarray:
    """Minibatch of step ``step``; a pure function of (seed, step) so resumed runs replay it."""
    return make_rng(seed, "batch", step).choice(train_size, size=batch_size, replace=False)


def train_step(model: GroupMixFormer, state: TrainState, images: Tensor, labels: np.ndarray,
               lr: float, seed: int, clip_norm: float = DEFAULT_CLIP):
    """
    Forward, backward, clip and update on one batch.

    Returns:
        (loss value, number of correct predictions)

    Raises:
        DivergenceError: If the loss or a gradient is non-finite
    """
    step = state.step + 1
    state.params.zero_grad()
    with Tape() as tape:
        logits, _ = model.forward(images, TRAIN, make_rng(seed, "dropout", step))
        loss = cross_entropy(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}", step=step)
    tape.backward(loss)
    grads = collect_grads(state.params)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient for {name} at step {step}", step=step, path=name)
    grads, _ = clip_grad_norm(grads, clip_norm)
    adamw_step(state, grads, lr)
    return value, correct(logits, labels)


def evaluate(model: GroupMixFormer, images: Tensor, labels: np.ndarray, batch_size: int = 64) -> float:
    """Eval-mode accuracy over a dataset."""
    hits = 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            chunk = Tensor.wrap(images.data[start:start + batch_size])
            logits, _ = model.forward(chunk, EVAL)
            hits += correct(logits, labels[start:start + batch_size])
    return hits / max(1, len(labels))


def train_toy(config: ModelConfig, task: SyntheticTask, steps: Optional[int] = None, seed: int = 0,
              options: Optional[TrainOptions] = None, metrics_path: Optional[Union[str, Path]] = None,
              checkpoint_path: Optional[Union[str, Path]] = None, checkpoint_dtype: str = "f32",
              resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train ``config`` on the synthetic task.

    Every random choice (init, data, batches, drop path) derives from
    ``seed``, so two runs with the same arguments produce identical metrics.

    Args:
        config: Model configuration (a toy-sized one is recommended)
        task: Synthetic task definition
        steps: Total step budget; overrides ``options.steps``
        seed: Run seed
        options: Optimizer, schedule and logging options
        metrics_path: Optional CSV written with ``step,lr,loss,accuracy`` rows
        checkpoint_path: Optional archive written at the end (or at ``stop_after``)
        checkpoint_dtype: ``f32`` or ``f64``
        resume: Archive with optimizer state to continue from. Only an
            ``f64`` archive resumes bit for bit; ``f32`` rounds the state.

    Returns:
        TrainResult with the metrics history

    Raises:
        DivergenceError: On a non-finite loss or gradient, carrying the step
    """
    options = options or TrainOptions()
    if steps is not None:
        options = TrainOptions(**{**options.__dict__, "steps": steps})
    if options.steps <= 0 or options.batch_size <= 0 or options.batch_size > options.train_size:
        raise ContractError(
            f"invalid budget: steps={options.steps}, batch={options.batch_size}, train_size={options.train_size}"
        )
    warmup = min(options.warmup, options.steps - 1)

    store, model = build_model(config, seed)
    data_task = SyntheticTask(**{**task.__dict__, "seed": seed})
    images, labels = gen_synthetic(data_task, options.train_size)
    state = init_train_state(
        store, options.base_lr, options.weight_decay,
        ScheduleSpec(total=options.steps, warmup=warmup, floor_lr=options.floor_lr),
    )
    if resume is not None:
        weights.load_train_state(resume, state)

    history: List[MetricsRow] = []
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        if resume is None or not metrics_path.exists():
            metrics_path.write_text(metrics_to_csv([]), encoding="utf-8")

    loss_sum, hits, seen, batches = 0.0, 0, 0, 0
    last = min(options.steps, options.stop_after or options.steps)
    for step in range(state.step + 1, last + 1):
        idx = batch_indices(seed, step, options.train_size, options.batch_size)
        lr = state.lr_at(step)
        value, batch_hits = train_step(
            model, state, Tensor.wrap(images.data[idx]), labels[idx], lr, seed, options.clip_norm,
        )
        loss_sum += value
        hits += batch_hits
        seen += len(idx)
        batches += 1
        if step % options.log_every == 0 or step == options.steps:
            row = MetricsRow(step, lr, loss_sum / batches, hits / seen)
            history.append(row)
            logger.info(f"step {step}/{options.steps} lr={lr:.3e} loss={row.loss:.4f} acc={row.accuracy:.3f}")
            if metrics_path is not None:
                with open(metrics_path, "a", encoding="utf-8", newline="") as f:
                    f.write(metrics_to_csv([row], header=False))
            loss_sum, hits, seen, batches = 0.0, 0, 0, 0

    if checkpoint_path is not None:
        weights.save_weights(store, checkpoint_path, checkpoint_dtype, state)
    return TrainResult(model=model, state=state, history=history)
