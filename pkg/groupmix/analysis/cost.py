"""
Parameter and FLOP accounting.

One analytic walker (:func:`groupmix.models.backbone.model_layers`) lists
every module with the tensors it owns and its multiply-adds, so parameter
totals, FLOP totals and the per-module breakdown always agree.

Convention: 1 multiply-add = 1 FLOP. Norms, activations, softmax and pooling
are not counted.
"""
from dataclasses import dataclass, field
from typing import List, Tuple, Union
import io
import csv
import logging

from ..core.errors import ContractError
from ..models.backbone import GroupMixFormer, check_resolution, model_layers
from ..models.configs import ModelConfig

logger = logging.getLogger(__name__)

FLOP_CONVENTION = "1 multiply-add = 1 FLOP; norm, activation, softmax and pooling excluded"
CSV_HEADER = ("path", "params", "flops")

Resolution = Union[int, Tuple[int, int]]


@dataclass
class CostRow:
    path: str
    params: int
    flops: int


@dataclass
class CostReport:
    """Totals plus the per-module breakdown they are summed from."""
    params: int
    flops: int
    rows: List[CostRow] = field(default_factory=list)
    resolution: Tuple[int, int] = (0, 0)
    batch: int = 1
    convention: str = FLOP_CONVENTION

    @property
    def mparams(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_csv(self, include_total: bool = True) -> str:
        """Render as ``path,params,flops`` CSV; the last row holds the totals."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow((row.path, row.params, row.flops))
        if include_total:
            writer.writerow(("total", self.params, self.flops))
        return buffer.getvalue()


def _resolution(resolution: Resolution) -> Tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    height, width = resolution
    return int(height), int(width)


def layer_costs(config: ModelConfig, resolution: Resolution = 0, batch: int = 1) -> List[CostRow]:
    """Breakdown rows for ``config``; a zero resolution yields parameter rows only."""
    height, width = _resolution(resolution)
    return [
        CostRow(layer.path, layer.params, layer.macs * batch)
        for layer in model_layers(config, height, width)
    ]


def _report(rows: List[CostRow], resolution: Tuple[int, int], batch: int) -> CostReport:
    return CostReport(
        params=sum(r.params for r in rows),
        flops=sum(r.flops for r in rows),
        rows=rows,
        resolution=resolution,
        batch=batch,
    )


def count_params(model: Union[GroupMixFormer, ModelConfig]) -> CostReport:
    """
    Exact parameter count with per-module breakdown.

    For a built model the counts come from the materialized ParamStore and
    must agree with the analytic layout.

    Raises:
        ContractError: If the store and the layout disagree
    """
    if isinstance(model, ModelConfig):
        return _report(layer_costs(model.validate()), (0, 0), 1)

    rows, seen = [], 0
    for layer in model_layers(model.config):
        params = sum(model.store[spec.name].size for spec in layer.specs)
        seen += len(layer.specs)
        rows.append(CostRow(layer.path, params, 0))
    if seen != len(model.store):
        raise ContractError(f"breakdown covers {seen} tensors but the store holds {len(model.store)}")
    return _report(rows, (0, 0), 1)


def estimate_flops(config: ModelConfig, resolution: Resolution = 224, batch: int = 1) -> CostReport:
    """
    Analytic multiply-add count of one forward pass.

    Args:
        config: Model configuration
        resolution: Square side or (H, W); multiples of 32
        batch: Number of images

    Raises:
        ConfigurationError: If the resolution is not a multiple of 32
    """
    height, width = _resolution(resolution)
    check_resolution(height, width)
    if batch <= 0:
        raise ContractError(f"batch must be positive, got {batch}")
    report = _report(layer_costs(config.validate(), (height, width), batch), (height, width), batch)
    logger.debug(f"{config.name} @ {height}x{width}: {report.mparams:.2f}M params, {report.gflops:.2f} GFLOPs")
    return report
