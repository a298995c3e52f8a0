"""fpqkit: floating-point grid quantization for small diffusion transformers.

Low-bit ExMy grids, min-max quantization, group-wise weight quantization,
learned-rounding calibration (original and scale-aware), online per-token
activation quantization, a toy DiT test bed, and reporting tools.
"""

from .errors import ConfigError, DecodeError, FpqError, NumericError, ShapeError
from .formats import (
    FpFormat,
    ValueGrid,
    enumerate_grid,
    fp_bias,
    fp_value,
    grid_density_near_zero,
    grid_magnitudes,
    parse_format,
)
from .quantize import (
    IntQuantParams,
    QuantizedTensor,
    TokenQuantConfig,
    dequantize,
    fp_minmax_quantize,
    group_quantize,
    int_quantize,
    quantize_dequantize,
    token_quantize,
)
from .adaround import CalibConfig, CalibResult, RoundingMask, calibrate_layer
from .tensor import make_rng
from .dit import (
    FormatAssignment,
    QuantizedModel,
    ToyDiTConfig,
    ToyDiTModel,
    load_checkpoint,
    make_toy_model,
    quantize_model,
    resolve_model,
    run_trajectories,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DecodeError", "FpqError", "NumericError", "ShapeError",
    "FpFormat", "ValueGrid", "enumerate_grid", "fp_bias", "fp_value",
    "grid_density_near_zero", "grid_magnitudes", "parse_format",
    "IntQuantParams", "QuantizedTensor", "TokenQuantConfig", "dequantize",
    "fp_minmax_quantize", "group_quantize", "int_quantize",
    "quantize_dequantize", "token_quantize",
    "CalibConfig", "CalibResult", "RoundingMask", "calibrate_layer",
    "make_rng",
    "FormatAssignment", "QuantizedModel", "ToyDiTConfig", "ToyDiTModel",
    "load_checkpoint", "make_toy_model", "quantize_model", "resolve_model",
    "run_trajectories", "save_checkpoint",
]
