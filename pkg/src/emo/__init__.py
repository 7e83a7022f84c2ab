"""EMO: lightweight vision models built from inverted residual mobile blocks
with expanded-window attention, in pure numpy.

The library covers the block algebra (meta mobile block, iRMB, EW-MHSA with
both multiplication orders), deterministic model assembly for the EMO-1M/2M/
5M/6M variants, exact parameter/MAC accounting with closed-form oracles,
receptive-field / path-length / similarity diagnostics, and reverse-mode
gradients for every primitive.
"""

from .analysis import (
    CostLine,
    CostReport,
    GradCheckReport,
    InfluenceMask,
    MPLReport,
    conv_receptive_radius,
    count_costs,
    diag_similarity,
    diag_similarity_of_features,
    formula_costs,
    grad_check,
    influence_mask,
    max_path_length,
)
from .attention import WindowLayout, window_merge, window_partition
from .irmb import (
    EquivalenceReport,
    IRMBConfig,
    default_heads,
    equivalence_check,
    ew_mhsa,
    irmb_forward,
    irmb_init_params,
    random_block_params,
)
from .mmb import (
    MMBConfig,
    mmb_config_from_dict,
    mmb_config_to_dict,
    mmb_forward,
    mmb_init_params,
    mmb_instantiate,
)
from .model import (
    EMOModel,
    EMOVariantConfig,
    PRESETS,
    build_emo,
    emo_forward,
    load_model,
    preset,
    save_model,
    stage_features,
)
from .ops import ConvSpec, CostMeter, cost_meter
from .serialize import ContainerError, dumps_params, load_params, save_params
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConvSpec", "CostLine", "CostMeter", "CostReport", "ContainerError",
    "EMOModel", "EMOVariantConfig", "EquivalenceReport", "GradCheckReport",
    "IRMBConfig", "InfluenceMask", "MMBConfig", "MPLReport", "PRESETS", "Rng",
    "Tensor", "WindowLayout", "build_emo", "conv_receptive_radius", "cost_meter",
    "count_costs", "default_heads", "diag_similarity", "diag_similarity_of_features",
    "dumps_params", "emo_forward", "equivalence_check", "ew_mhsa", "formula_costs",
    "grad_check", "influence_mask", "irmb_forward", "irmb_init_params",
    "load_model", "load_params", "max_path_length", "mmb_forward",
    "mmb_config_from_dict", "mmb_config_to_dict",
    "mmb_init_params", "mmb_instantiate", "preset", "random_block_params",
    "save_model", "save_params", "stage_features", "window_merge", "window_partition",
]
