"""
CPU micro-benchmark of factorized versus quadratic attention.
"""
from dataclasses import dataclass
from typing import List, Sequence
import io
import csv
import logging
import time

import numpy as np

from ..core.errors import ContractError
from ..core.rng import make_rng
from ..core.tensor import Tensor, no_grad
from ..models.configs import AttentionKind
from ..models.gma import attention_macs, factorized_attention, vanilla_attention

logger = logging.getLogger(__name__)

DEFAULT_TOKENS = (64, 256, 1024, 4096)


@dataclass
class BenchRow:
    tokens: int
    kernel: str
    wall_time: float
    macs: int


def _timed(fn, reps: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def bench_attention(n_list: Sequence[int] = DEFAULT_TOKENS, d: int = 64, heads: int = 1, reps: int = 5,
                    seed: int = 0, kernels: Sequence[str] = ("factorized", "vanilla")) -> List[BenchRow]:
    """
    Median wall time and analytic MACs of each attention kernel per token count.

    Args:
        n_list: Token counts N
        d: Attended width (split across heads)
        heads: Number of heads
        reps: Timed repetitions after one warm-up run
        seed: Seed of the ``bench`` stream
        kernels: Subset of ``factorized`` and ``vanilla``

    Raises:
        ContractError: If reps < 3 or d is not divisible by heads
    """
    if reps < 3:
        raise ContractError(f"bench needs at least 3 repetitions, got {reps}")
    if d % heads:
        raise ContractError(f"width {d} is not divisible by {heads} heads")
    head_dim = d // heads
    scale = 1.0 / np.sqrt(head_dim)
    rows = []
    for n in n_list:
        rng = make_rng(seed, "bench", n)
        q, k, v = (Tensor.wrap(rng.standard_normal((1, heads, n, head_dim))) for _ in range(3))
        for kernel in kernels:
            kind = AttentionKind(kernel)
            if kind == AttentionKind.VANILLA:
                call = lambda: vanilla_attention(q, k, v, scale)
            else:
                call = lambda: factorized_attention(q, k, v, scale)
            with no_grad():
                wall = _timed(call, reps)
            macs = attention_macs(n, d, heads, kind)
            logger.info(f"{kind.value} N={n}: {wall * 1e3:.3f} ms, {macs} MACs")
            rows.append(BenchRow(n, kind.value, wall, macs))
    return rows


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares exponent b of y ≈ a·x^b."""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ContractError("need at least two (x, y) pairs to fit a slope")
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope)


def bench_to_csv(rows: Sequence[BenchRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("n", "kernel", "wall_time", "macs"))
    for row in rows:
        writer.writerow((row.tokens, row.kernel, f"{row.wall_time:.6e}", row.macs))
    return buffer.getvalue()
