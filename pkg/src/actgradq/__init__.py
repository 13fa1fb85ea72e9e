"""Low-bit activation and gradient quantization for memory-efficient training."""

from .codec import (CodecKind, QuantizedTensor, dequantize_blockwise, fp8_decode,
                    fp8_encode, quantize_blockwise)

__version__ = "0.1.0"

__all__ = [
    "CodecKind",
    "QuantizedTensor",
    "dequantize_blockwise",
    "fp8_decode",
    "fp8_encode",
    "quantize_blockwise",
]
