from .config import ArchConfig, BlockKind, BlockSpec, plan_blocks, ladder_configs, full_size_config, desk_config
from .cost import CostReport, count_params, count_flops, cost_report, ablation_delta
from .model import UNetModel, build, init_weights

__all__ = [
    "ArchConfig", "BlockKind", "BlockSpec", "plan_blocks", "ladder_configs",
    "full_size_config", "desk_config", "CostReport", "count_params",
    "count_flops", "cost_report", "ablation_delta", "UNetModel", "build",
    "init_weights",
]
