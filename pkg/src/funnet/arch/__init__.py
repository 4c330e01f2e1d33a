"""Architecture descriptions, accounting and model construction."""

from funnet.arch.accounting import count_flops, count_params, output_grid
from funnet.arch.model import (
    LefunFront,
    LefunModel,
    Model,
    dct_filter_bank,
    front_param_count,
    instantiate,
)
from funnet.arch.spec import (
    PRESETS,
    ArchSpec,
    BlockSpec,
    ScaleCoeffs,
    Stage,
    compound_scale,
    efun_base,
    efun_variant_a,
    efun_variant_b,
    from_text,
    preset,
    resfun,
    to_text,
)

__all__ = [
    "PRESETS", "ArchSpec", "BlockSpec", "LefunFront", "LefunModel", "Model",
    "ScaleCoeffs", "Stage", "compound_scale", "count_flops", "count_params",
    "dct_filter_bank", "efun_base", "efun_variant_a", "efun_variant_b",
    "front_param_count", "from_text", "instantiate", "output_grid", "preset",
    "resfun", "to_text",
]
