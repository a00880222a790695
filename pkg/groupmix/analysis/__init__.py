"""
Cost accounting, ablation variants, attention benchmarks and gradient suites.
"""
from .ablation import (
    AblationVariant,
    ablation_grid,
    aggregator_table,
    conv_first_variant,
    implementation_table,
    kernel_table,
    make_ablation_variant,
)
from .bench import BenchRow, bench_attention, fit_loglog_slope
from .cost import CostReport, CostRow, count_params, estimate_flops, layer_costs
from .gradients import SuiteResult, run_gradcheck
