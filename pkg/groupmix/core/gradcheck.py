"""
Central finite-difference gradient oracle.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple
import logging

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-3
ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""
    name: str
    max_rel_err: float
    worst_tensor: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    checked: int
    deterministic: bool
    rtol: float
    element_errors: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.deterministic and self.max_rel_err <= self.rtol

    def as_fields(self) -> Dict[str, str]:
        """Key/value view used by line-oriented reports."""
        index = "" if self.worst_index is None else ":".join(str(i) for i in self.worst_index)
        return {
            "check": self.name,
            "status": "pass" if self.passed else "fail",
            "max_rel_err": f"{self.max_rel_err:.3e}",
            "worst_tensor": self.worst_tensor or "",
            "worst_index": index,
            "checked": str(self.checked),
            "deterministic": str(self.deterministic).lower(),
        }


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    if out.size != 1:
        raise ContractError(f"gradient check needs a scalar function, got shape {out.shape}")
    return out.item()


def _select(shape: Tuple[int, ...], max_elements: Optional[int], rng: Optional[np.random.Generator]) -> Iterable[Tuple[int, ...]]:
    total = int(np.prod(shape)) if shape else 1
    if max_elements is None or total <= max_elements:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=max_elements, replace=False))
    return [np.unravel_index(int(i), shape) if shape else () for i in flat]


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    name: str = "check",
    abs_floor: float = ABS_FLOOR,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` takes no arguments and closes over the tensors in ``inputs``; each
    checked element is perturbed in place by ±h and restored afterwards.
    The relative error of an element is |a - n| / max(|a|, |n|, abs_floor).

    Args:
        f: Scalar-valued function of the input tensors
        inputs: Named tensors to differentiate with respect to
        h: Finite-difference step
        rtol: Pass threshold on the maximum relative error
        max_elements: Per-tensor cap on checked elements (random subset)
        rng: Generator used to choose the subset
        name: Label carried into the report
        abs_floor: Denominator floor for near-zero gradients

    Returns:
        GradCheckReport
    """
    for tensor in inputs.values():
        tensor.requires_grad = True
        tensor.zero_grad()

    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ContractError(f"gradient check needs a scalar function, got shape {loss.shape}")
    tape.backward(loss)
    analytic = {
        key: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for key, t in inputs.items()
    }

    first, second = _evaluate(f), _evaluate(f)
    deterministic = first == second and first == loss.item()
    if not deterministic:
        logger.warning(f"{name}: repeated evaluation differs ({first!r} vs {second!r})")

    worst, worst_tensor, worst_index, checked = -1.0, None, None, 0
    element_errors: Dict[str, np.ndarray] = {}
    for key, tensor in inputs.items():
        errors = np.full(tensor.shape, np.nan)
        for index in _select(tensor.shape, max_elements, rng):
            original = tensor.data[index]
            tensor.data[index] = original + h
            plus = _evaluate(f)
            tensor.data[index] = original - h
            minus = _evaluate(f)
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[key][index]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
            errors[index] = err
            checked += 1
            if not err <= worst:
                worst, worst_tensor, worst_index = float(err), key, tuple(int(i) for i in index)
        element_errors[key] = errors

    report = GradCheckReport(
        name=name,
        max_rel_err=max(worst, 0.0),
        worst_tensor=worst_tensor,
        worst_index=worst_index,
        checked=checked,
        deterministic=deterministic,
        rtol=rtol,
        element_errors=element_errors,
    )
    if report.passed:
        logger.debug(f"{name}: max rel err {worst:.2e} over {checked} elements")
    else:
        logger.warning(f"{name}: FAILED max rel err {worst:.2e} at {worst_tensor}{list(worst_index or ())}")
    return report


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = DEFAULT_STEP,
    rtol: float = DEFAULT_RTOL,
    **kwargs,
) -> GradCheckReport:
    """Single-input form of :func:`check_gradients`."""
    return check_gradients(lambda: f(x), {"x": x}, h=h, rtol=rtol, **kwargs)
