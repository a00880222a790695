"""
Synthetic group-pattern task.

Each image is low-amplitude noise carrying two constant k×k patches at random
non-overlapping positions. The label is 1 when the two patch intensities
match within ``margin`` and 0 when they differ by at least ``min_gap``, so
a classifier has to compare two group aggregates at arbitrary locations.
"""
from dataclasses import dataclass
from typing import Tuple
import logging
import zlib

import numpy as np

from ..core.errors import ConfigurationError
from ..core.rng import make_rng
from ..core.tensor import Tensor

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1


@dataclass(frozen=True)
class SyntheticTask:
    height: int = 32
    width: int = 32
    channels: int = 3
    num_classes: int = 2
    patch_size: int = 3
    noise_std: float = 0.05
    low: float = 0.5
    high: float = 1.5
    margin: float = 0.1
    min_gap: float = 0.35
    seed: int = 0

    def validate(self):
        k = self.patch_size
        if k < 1 or self.height < k or self.width < k or (self.height < 2 * k and self.width < 2 * k):
            raise ConfigurationError(
                f"a {self.height}x{self.width} grid cannot hold two non-overlapping {k}x{k} patches"
            )
        if self.num_classes != 2:
            raise ConfigurationError(f"the group-pattern task has 2 classes, got {self.num_classes}")
        if not 0 < self.margin < self.min_gap < self.high - self.low:
            raise ConfigurationError(
                f"need 0 < margin ({self.margin}) < min_gap ({self.min_gap}) < intensity range ({self.high - self.low})"
            )


def _positions(rng: np.random.Generator, task: SyntheticTask) -> Tuple[int, int, int, int]:
    k = task.patch_size
    while True:
        r1, r2 = rng.integers(0, task.height - k + 1, size=2)
        c1, c2 = rng.integers(0, task.width - k + 1, size=2)
        if abs(r1 - r2) >= k or abs(c1 - c2) >= k:
            return int(r1), int(c1), int(r2), int(c2)


def _intensities(rng: np.random.Generator, task: SyntheticTask, match: bool) -> Tuple[float, float]:
    a = rng.uniform(task.low, task.high)
    while True:
        if match:
            b = a + rng.uniform(-task.margin, task.margin)
            if task.low <= b <= task.high:
                return a, b
        else:
            b = rng.uniform(task.low, task.high)
            if abs(a - b) >= task.min_gap:
                return a, b


def label_of(a: float, b: float, task: SyntheticTask) -> int:
    return int(abs(a - b) <= task.margin)


def gen_synthetic(task: SyntheticTask, n: int, split: str = "train") -> Tuple[Tensor, np.ndarray]:
    """
    Generate ``n`` labelled images.

    The same (task, n, split) always yields bit-identical data; ``split``
    names an independent stream, e.g. for held-out evaluation.

    Returns:
        images (n, C, H, W) and int64 labels (n,)

    Raises:
        ConfigurationError: If the grid cannot hold two patches
    """
    task.validate()
    rng = make_rng(task.seed, "data", GENERATOR_VERSION, zlib.crc32(split.encode("utf-8")))
    k = task.patch_size
    images = rng.normal(0.0, task.noise_std, size=(n, task.channels, task.height, task.width))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        match = bool(rng.random() < 0.5)
        a, b = _intensities(rng, task, match)
        r1, c1, r2, c2 = _positions(rng, task)
        images[i, :, r1:r1 + k, c1:c1 + k] = a
        images[i, :, r2:r2 + k, c2:c2 + k] = b
        labels[i] = label_of(a, b, task)
    logger.debug(f"generated {n} {split} samples, {labels.mean():.3f} positive")
    return Tensor.wrap(images), labels
