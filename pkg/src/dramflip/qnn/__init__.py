"""Desk-scale quantized neural networks: data, training, quantization, bit gradients."""

from .data import Dataset, make_dataset
from .layers import cnn_spec, mlp_spec
from .model import VICTIM_RECIPE, AccuracyResult, FloatModel, TrainingDiverged, accuracy, train_float
from .quant import (BitGradients, QuantizedModel, bit_gradients, bit_weights, dequantize, forward_loss,
                    load_qnn, quantize, save_qnn)

__all__ = [
    "VICTIM_RECIPE", "AccuracyResult", "BitGradients", "Dataset", "FloatModel", "QuantizedModel", "TrainingDiverged",
    "accuracy", "bit_gradients", "bit_weights", "cnn_spec", "dequantize", "forward_loss", "load_qnn",
    "make_dataset", "mlp_spec", "quantize", "save_qnn", "train_float",
]
