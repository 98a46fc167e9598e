"""A small quantized inference engine with bounded activations and early exits.

Training needs torch; everything else runs on numpy alone.
"""
from .activations import logclip, relu_clip
from .engine import EngineFormatError, EngineImage, LayoutEntry, deserialize, serialize
from .exits import should_exit_classifier, should_exit_detector
from .model import FloatLayer, FloatModel, QLayer, QuantizedModel
from .quant import apply_theta, calibrate_theta, dequantize_tensor, quantize, quantize_tensor
from .runtime import ForwardResult, Runtime, forward
from .spec import (ActivationSpec, DetectionSet, ExitPolicy, InternalClassifier, LayerSpec,
                   ModelSpec, QuantParams, SpecError, load_model_spec)

__all__ = [
    "ActivationSpec", "DetectionSet", "EngineFormatError", "EngineImage", "ExitPolicy",
    "FloatLayer", "FloatModel", "ForwardResult", "InternalClassifier", "LayerSpec",
    "LayoutEntry", "ModelSpec", "QLayer", "QuantParams", "QuantizedModel", "Runtime",
    "SpecError", "apply_theta", "calibrate_theta", "dequantize_tensor", "deserialize",
    "forward", "load_model_spec", "logclip", "quantize", "quantize_tensor", "relu_clip",
    "serialize", "should_exit_classifier", "should_exit_detector",
]
