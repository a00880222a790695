"""
Loss and metrics.
"""
import numpy as np

from ..core import ops
from ..core.tensor import Tensor


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-softmax probability of the true class.

    Raises:
        ContractError: If a label lies outside [0, C)
    """
    return ops.cross_entropy(logits, labels)


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))


def correct(logits: Tensor, labels: np.ndarray) -> int:
    return int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(labels)))
