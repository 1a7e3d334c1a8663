"""Block-quantized Int8 inference kernels with scalar references."""
from qf.halffloat import f16_decode, f16_encode, f16_to_f32_row, f32_to_f16_row
from qf.quant import (
    QMatrix,
    QuantStats,
    ScaleFormat,
    TensorFormat,
    container_bytes,
    dequantize_block,
    dequantize_row,
    quantize_block,
    quantize_row,
)

__version__ = "0.1.0"
