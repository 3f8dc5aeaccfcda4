"""Post-training int8 quantization and the integer-only inference path."""
from .io import load_qmodel, save_qmodel
from .model import (Calibration, Comparison, QuantizedTensor, QuantizedUNet, calibrate, compare_models,
                    float_payload_bytes, int_forward, int_forward_full, int_predict, quantize_model)
from .scheme import Multiplier, QuantParams, dequantize, quantize, quantize_weights, round_half_away

__all__ = [
    "Calibration", "Comparison", "Multiplier", "QuantParams", "QuantizedTensor", "QuantizedUNet", "calibrate",
    "compare_models", "dequantize", "float_payload_bytes", "int_forward", "int_forward_full", "int_predict",
    "load_qmodel", "quantize", "quantize_model", "quantize_weights", "round_half_away", "save_qmodel",
]
