"""
Finite-difference suites: every registered op, then composite modules up to
the full model.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple
import logging

import numpy as np

from ..core import ops
from ..core.errors import ConfigurationError
from ..core.gradcheck import DEFAULT_RTOL, DEFAULT_STEP, GradCheckReport, check_gradients
from ..core.registry import registry
from ..core.rng import make_rng
from ..core.tensor import Tensor
from ..models.backbone import (
    EVAL,
    TRAIN,
    build_model,
    encoder_block_forward,
    model_param_specs,
    patch_embed_2x,
    patch_embed_4x,
)
from ..models.configs import AggregatorKind, AggregatorSpec, AttentionKind, GmaConfig, PatchEmbedKind
from ..models.gma import gma_forward, gma_param_specs
from ..models.params import ParamSpec, ParamStore, materialize, norm, prefixed, weight, bias
from ..models.presets import get_preset

logger = logging.getLogger(__name__)

SCALES = ("tiny", "small")
OP_RTOL = 1e-4

Case = Tuple[Callable[[], Tensor], Dict[str, Tensor]]


@dataclass
class SuiteResult:
    scale: str
    seed: int
    reports: List[GradCheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> List[GradCheckReport]:
        return [r for r in self.reports if not r.passed]

    def worst(self) -> Optional[GradCheckReport]:
        if not self.reports:
            return None
        return max(self.reports, key=lambda r: (not r.passed, r.max_rel_err))

    def to_lines(self) -> List[str]:
        """One key=value line per check, then a summary line."""
        lines = [" ".join(f"{k}={v}" for k, v in r.as_fields().items()) for r in self.reports]
        worst = self.worst()
        summary = {
            "suite": self.scale,
            "seed": str(self.seed),
            "checks": str(len(self.reports)),
            "failed": str(len(self.failures)),
            "status": "pass" if self.passed else "fail",
        }
        if worst is not None:
            summary["worst"] = worst.name
            summary["worst_rel_err"] = f"{worst.max_rel_err:.3e}"
        lines.append(" ".join(f"{k}={v}" for k, v in summary.items()))
        return lines


def _leaf(rng: np.random.Generator, *shape: int, spread: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * spread, requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Weighted sum with fixed random weights, so every output element gets a distinct adjoint."""
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: ops.sum_all(ops.mul(y, weights))


def _op_case(build: Callable[..., Tensor], rng: np.random.Generator, **leaves: Tuple[int, ...]) -> Case:
    tensors = {name: _leaf(rng, *shape) for name, shape in leaves.items()}
    project = _project(build(**tensors), rng)
    return (lambda: project(build(**tensors))), tensors


def _op_cases() -> Dict[str, Callable[[np.random.Generator], Case]]:
    labels = np.array([0, 2, 1, 2])
    factors = np.array([0.5, -1.5, 2.0])
    return {
        "add": lambda r: _op_case(lambda a, b: ops.add(a, b), r, a=(3, 4), b=(3, 4)),
        "mul": lambda r: _op_case(lambda a, b: ops.mul(a, b), r, a=(3, 4), b=(3, 4)),
        "scale": lambda r: _op_case(lambda x: ops.scale(x, 1.7), r, x=(3, 4)),
        "add_bias": lambda r: _op_case(lambda x, b: ops.add_bias(x, b, axis=1), r, x=(2, 3, 4), b=(3,)),
        "scale_samples": lambda r: _op_case(lambda x: ops.scale_samples(x, factors), r, x=(3, 4)),
        "reshape": lambda r: _op_case(lambda x: ops.reshape(x, (3, 4)), r, x=(2, 6)),
        "permute": lambda r: _op_case(lambda x: ops.permute(x, (2, 0, 1)), r, x=(2, 3, 4)),
        "concat": lambda r: _op_case(lambda a, b: ops.concat([a, b], axis=1), r, a=(2, 3), b=(2, 2)),
        "slice_axis": lambda r: _op_case(lambda x: ops.slice_axis(x, 1, 3, axis=1), r, x=(4, 5)),
        "sum": lambda r: _op_case(lambda x: ops.sum_all(ops.mul(x, x)), r, x=(3, 4)),
        "mean": lambda r: _op_case(lambda x: ops.mean_all(ops.mul(x, x)), r, x=(3, 4)),
        "matmul": lambda r: _op_case(lambda a, b: ops.matmul(a, b), r, a=(3, 4), b=(4, 2)),
        "matmul[batched]": lambda r: _op_case(lambda a, b: ops.matmul(a, b), r, a=(2, 3, 4), b=(2, 4, 5)),
        "softmax": lambda r: _op_case(lambda x: ops.softmax(x, axis=-1), r, x=(3, 5)),
        "softmax[axis=0]": lambda r: _op_case(lambda x: ops.softmax(x, axis=0), r, x=(4, 3)),
        "layer_norm": lambda r: _op_case(lambda x, g, b: ops.layer_norm(x, 1, g, b), r, x=(2, 5, 3, 3), g=(5,), b=(5,)),
        "layer_norm[tokens]": lambda r: _op_case(lambda x, g, b: ops.layer_norm(x, -1, g, b), r, x=(2, 3, 6), g=(6,), b=(6,)),
        "hardswish": lambda r: _op_case(lambda x: ops.hardswish(ops.scale(x, 2.5)), r, x=(4, 6)),
        "gelu": lambda r: _op_case(lambda x: ops.gelu(x), r, x=(4, 5)),
        "gelu[tanh]": lambda r: _op_case(lambda x: ops.gelu(x, approximate="tanh"), r, x=(4, 5)),
        "global_avg_pool": lambda r: _op_case(lambda x: ops.global_avg_pool(x), r, x=(2, 3, 4, 4)),
        "conv2d_depthwise[k=3]": lambda r: _op_case(lambda x, w, b: ops.conv2d_depthwise(x, w, b, 3), r,
                                                    x=(2, 3, 6, 6), w=(3, 3, 3), b=(3,)),
        "conv2d_depthwise[k=5]": lambda r: _op_case(lambda x, w, b: ops.conv2d_depthwise(x, w, b, 5), r,
                                                    x=(1, 2, 5, 5), w=(2, 5, 5), b=(2,)),
        "conv2d_depthwise[stride=2]": lambda r: _op_case(lambda x, w, b: ops.conv2d_depthwise(x, w, b, 3, stride=2), r,
                                                         x=(1, 2, 7, 7), w=(2, 3, 3), b=(2,)),
        "conv2d_pointwise": lambda r: _op_case(lambda x, w, b: ops.conv2d_pointwise(x, w, b), r,
                                               x=(2, 3, 4, 4), w=(5, 3), b=(5,)),
        "conv2d_strided[stride=1]": lambda r: _op_case(lambda x, w, b: ops.conv2d_strided(x, w, b, 1), r,
                                                       x=(1, 2, 5, 5), w=(3, 2, 3, 3), b=(3,)),
        "conv2d_strided[stride=2]": lambda r: _op_case(lambda x, w, b: ops.conv2d_strided(x, w, b, 2), r,
                                                       x=(2, 2, 7, 7), w=(3, 2, 3, 3), b=(3,)),
        "pool2d[min]": lambda r: _op_case(lambda x: ops.pool2d(x, "min", 3), r, x=(2, 2, 5, 5)),
        "pool2d[max]": lambda r: _op_case(lambda x: ops.pool2d(x, "max", 3), r, x=(2, 2, 5, 5)),
        "pool2d[avg]": lambda r: _op_case(lambda x: ops.pool2d(x, "avg", 5), r, x=(2, 2, 5, 5)),
        "cross_entropy": lambda r: _ce_case(r, labels),
    }


def _ce_case(rng: np.random.Generator, labels: np.ndarray) -> Case:
    logits = _leaf(rng, len(labels), 3)
    return (lambda: ops.cross_entropy(logits, labels)), {"logits": logits}


def _worst(reports: List[GradCheckReport], name: str) -> GradCheckReport:
    worst = max(reports, key=lambda r: (not r.passed, r.max_rel_err))
    return GradCheckReport(
        name=name,
        max_rel_err=worst.max_rel_err,
        worst_tensor=worst.worst_tensor,
        worst_index=worst.worst_index,
        checked=sum(r.checked for r in reports),
        deterministic=all(r.deterministic for r in reports),
        rtol=worst.rtol,
    )


def run_op_suite(seed: int = 0, points: int = 10, h: float = DEFAULT_STEP, rtol: float = OP_RTOL) -> List[GradCheckReport]:
    """
    Check every differentiable op at ``points`` random inputs.

    One report per case, holding the worst point.
    """
    cases = _op_cases()
    covered = {name.split("[")[0] for name in cases}
    missing = set(registry.list_functions()) - covered
    if missing:
        logger.warning(f"ops without a gradient case: {', '.join(sorted(missing))}")
    reports = []
    for index, (name, build) in enumerate(cases.items()):
        point_reports = []
        for point in range(points):
            f, inputs = build(make_rng(seed, "check", index, point))
            point_reports.append(check_gradients(f, inputs, h=h, rtol=rtol, name=name))
        reports.append(_worst(point_reports, name))
    return reports


def _block_store(config: GmaConfig, seed: int, spread: float = 1.0) -> ParamStore:
    """GMA block parameters with non-trivial norm affines."""
    store = materialize(gma_param_specs(config), seed)
    rng = make_rng(seed, "check", 1000)
    for name, tensor in store.items():
        if name.endswith("norm.weight"):
            tensor.data[...] = 1.0 + 0.1 * rng.standard_normal(tensor.shape)
        elif name.endswith(".weight"):
            tensor.data[...] = spread * rng.standard_normal(tensor.shape) / np.sqrt(max(1, tensor.shape[-1]))
        else:
            tensor.data[...] = 0.1 * rng.standard_normal(tensor.shape)
    return store


def _inputs(store: ParamStore, **extra: Tensor) -> Dict[str, Tensor]:
    inputs = dict(store.items())
    inputs.update(extra)
    return inputs


def _gma_case(config: GmaConfig, seed: int, batch: int, side: int) -> Case:
    store = _block_store(config, seed)
    rng = make_rng(seed, "check", 2000)
    x = _leaf(rng, batch, side * side, config.dim)
    scope = store.scope("")
    project = _project(gma_forward(x, side, side, config, scope), rng)
    return (lambda: project(gma_forward(x, side, side, config, scope))), _inputs(store, x=x)


def _encoder_case(config: GmaConfig, seed: int, batch: int, side: int, drop_rate: float, mode: str) -> Case:
    dim = config.dim
    specs = (
        norm("norm1", dim)
        + prefixed("gma", gma_param_specs(config))
        + norm("norm2", dim)
        + [weight("ffn.fc1.weight", dim, 4 * dim), bias("ffn.fc1.bias", 4 * dim),
           weight("ffn.fc2.weight", 4 * dim, dim), bias("ffn.fc2.bias", dim)]
    )
    store = materialize(specs, seed)
    rng = make_rng(seed, "check", 3000)
    for name, tensor in store.items():
        if name.endswith(".weight") and tensor.ndim >= 2:
            tensor.data[...] = rng.standard_normal(tensor.shape) / np.sqrt(tensor.shape[-1])
    x = _leaf(rng, batch, side * side, dim)
    scope = store.scope("")

    def f():
        drop_rng = make_rng(seed, "dropout", 0)
        return encoder_block_forward(x, side, side, scope, config, drop_rate, mode, drop_rng)

    project = _project(f(), rng)
    return (lambda: project(f())), _inputs(store, x=x)


def _subset_store(specs: List[ParamSpec], prefix: str, seed: int) -> ParamStore:
    return materialize([s for s in specs if s.name.startswith(prefix)], seed)


def _embed_4x_case(seed: int, preset: str, side: int) -> Case:
    store = _subset_store(model_param_specs(get_preset(preset)), "stem.", seed)
    rng = make_rng(seed, "check", 4000)
    for name, tensor in store.items():
        if tensor.ndim == 4:
            tensor.data[...] = rng.standard_normal(tensor.shape) / np.sqrt(9 * tensor.shape[1])
    img = _leaf(rng, 1, 3, side, side)
    scope = store.scope("stem")
    project = _project(patch_embed_4x(img, scope), rng)
    return (lambda: project(patch_embed_4x(img, scope))), _inputs(store, img=img)


def _embed_2x_case(seed: int, kind: PatchEmbedKind, side: int) -> Case:
    config = get_preset("tiny").replace(patch_embed=kind)
    store = _subset_store(model_param_specs(config), "stages.1.embed.", seed)
    rng = make_rng(seed, "check", 5000)
    x = _leaf(rng, 2, config.stages[0].dim, side, side)
    scope = store.scope("stages.1.embed")
    project = _project(patch_embed_2x(x, scope, kind), rng)
    return (lambda: project(patch_embed_2x(x, scope, kind))), _inputs(store, x=x)


def _model_case(seed: int, preset: str, side: int, batch: int, mode: str) -> Case:
    _, model = build_model(get_preset(preset), seed)
    rng = make_rng(seed, "check", 6000)
    img = Tensor(rng.standard_normal((batch, 3, side, side)))
    labels = rng.integers(0, model.config.num_classes, size=batch)

    def f():
        logits, _ = model.forward(img, mode, make_rng(seed, "dropout", 0))
        return ops.cross_entropy(logits, labels)

    return f, dict(model.store.items())


def run_model_suite(scale: str = "tiny", seed: int = 0, h: float = DEFAULT_STEP,
                    rtol: float = DEFAULT_RTOL) -> List[GradCheckReport]:
    """
    Module-level and end-to-end checks.

    ``tiny`` keeps every case small enough for a single CPU core in well
    under a minute; ``small`` widens the blocks and samples more elements.
    """
    if scale not in SCALES:
        raise ConfigurationError(f"unknown gradcheck scale {scale!r}; choose from {', '.join(SCALES)}")
    small = scale == "small"
    dim = 20 if small else 10
    heads = 2
    side = 6 if small else 4
    per_tensor = 3 if small else 1
    pools = (AggregatorSpec.identity(), AggregatorSpec(AggregatorKind.MAX_POOL, 3),
             AggregatorSpec(AggregatorKind.AVG_POOL, 5), AggregatorSpec(AggregatorKind.MIN_POOL, 3))

    cases: List[Tuple[str, Callable[[], Case], Optional[int]]] = [
        ("gma_block", lambda: _gma_case(GmaConfig(dim, heads), seed, 2, side), None),
        ("gma_block[softmax_on_context]",
         lambda: _gma_case(GmaConfig(dim, heads, softmax_on_context=True), seed, 1, side), None),
        ("gma_block[vanilla]",
         lambda: _gma_case(GmaConfig(dim, heads, attention=AttentionKind.VANILLA), seed, 1, side), None),
        ("gma_block[pools]",
         lambda: _gma_case(GmaConfig(dim, heads, pre_attention=pools), seed, 1, side), None),
        ("encoder_block", lambda: _encoder_case(GmaConfig(dim, heads), seed, 2, side, 0.0, EVAL), None),
        ("encoder_block[drop_path]",
         lambda: _encoder_case(GmaConfig(dim, heads), seed, 4, side, 0.5, TRAIN), None),
        ("patch_embed_4x", lambda: _embed_4x_case(seed, "toy" if small else "tiny", 8), None),
        ("patch_embed_2x[separable]", lambda: _embed_2x_case(seed, PatchEmbedKind.SEPARABLE, side), None),
        ("patch_embed_2x[dense]", lambda: _embed_2x_case(seed, PatchEmbedKind.DENSE, side), None),
        ("model", lambda: _model_case(seed, "toy" if small else "tiny", 64, 2, EVAL), per_tensor),
    ]
    if small:
        cases.append(("model[train]", lambda: _model_case(seed, "tiny", 64, 4, TRAIN), per_tensor))

    reports = []
    for index, (name, build, max_elements) in enumerate(cases):
        f, inputs = build()
        reports.append(check_gradients(
            f, inputs, h=h, rtol=rtol, max_elements=max_elements,
            rng=make_rng(seed, "check", 7000 + index), name=name,
        ))
    return reports


def run_gradcheck(scale: str = "tiny", seed: int = 0, h: float = DEFAULT_STEP, rtol: float = DEFAULT_RTOL,
                  fault: Optional[str] = None) -> SuiteResult:
    """
    Run the op suite and the model suite.

    Args:
        scale: ``tiny`` or ``small``
        seed: Seed of every random input and parameter
        h: Finite-difference step
        rtol: Tolerance of the composite checks (op checks use 1e-4)
        fault: Optional registered op whose backward is negated for the run
    """
    if fault is not None:
        with registry.inject_fault(fault):
            return run_gradcheck(scale, seed, h, rtol)
    result = SuiteResult(scale=scale, seed=seed)
    result.reports.extend(run_op_suite(seed, points=10, h=h))
    result.reports.extend(run_model_suite(scale, seed, h, rtol))
    logger.info(f"gradcheck {scale}: {len(result.reports) - len(result.failures)}/{len(result.reports)} passed")
    return result
