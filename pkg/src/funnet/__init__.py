"""Frequency-domain utilization networks (FUN).

JPEG-style DCT preprocessing, a small numpy autodiff engine, builders for the
eFUN / ResFUN families with parameter and MAC accounting, and input-channel
compression.
"""

from funnet.dct_codec import (
    FULL_SPEC,
    CompressionSpec,
    DctTensor,
    PlaneSet,
    block_dct8,
    block_idct8,
    preprocess,
    rgb_to_ycbcr,
    zigzag_order,
)
from funnet.errors import (
    ConfigError,
    DatasetError,
    DegenerateScaleError,
    DimensionError,
    DivergenceError,
    FunError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "FULL_SPEC",
    "CompressionSpec",
    "ConfigError",
    "DatasetError",
    "DctTensor",
    "DegenerateScaleError",
    "DimensionError",
    "DivergenceError",
    "FunError",
    "PlaneSet",
    "SpecError",
    "block_dct8",
    "block_idct8",
    "preprocess",
    "rgb_to_ycbcr",
    "zigzag_order",
]
