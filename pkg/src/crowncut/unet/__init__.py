"""From-scratch U-Net: layers with explicit gradients, Adam training, model files."""
from .estimator import QuantizedSegmenter, UNetSegmenter
from .io import load_model, save_model
from .model import (UNetConfig, UNetModel, activation_names, build_model, forward, layer_specs, loss_and_gradients,
                    predict_mask, predict_proba, unet_geometry)
from .train import Dataset, EpochRecord, TrainingConfig, TrainResult, fit_model, pixel_accuracy, split_indices, train

__all__ = [
    "Dataset", "EpochRecord", "QuantizedSegmenter", "TrainResult", "TrainingConfig", "UNetConfig", "UNetModel",
    "UNetSegmenter", "activation_names", "build_model", "fit_model", "forward", "layer_specs", "load_model",
    "loss_and_gradients", "pixel_accuracy", "predict_mask", "predict_proba", "save_model", "split_indices", "train",
    "unet_geometry",
]
