"""
Synthetic task, loss, optimizer and the toy training loop.
"""
from .baseline import BaselineResult, fit_pixel_baseline
from .data import GENERATOR_VERSION, SyntheticTask, gen_synthetic
from .losses import accuracy, cross_entropy
from .loop import MetricsRow, TrainOptions, TrainResult, evaluate, train_step, train_toy
from .optim import ScheduleSpec, TrainState, adamw_step, clip_grad_norm, cosine_lr, init_train_state
