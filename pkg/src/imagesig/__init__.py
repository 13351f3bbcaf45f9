"""Image classification on path-signature features of pixel-row streams."""

__version__ = "0.1.0"

from .imagestream import AugmentSpec, FeaturizeConfig, featurize, featurize_dataset, load_image
from .nn import ModelSpec, build_model, count_flops, count_params, load_model, save_model
from .quant import load_any, quantize
from .sigcore import LyndonBasis, PathStream, TensorSeries, log_signature, path_signature
from .train_eval import TrainConfig, evaluate, train

__all__ = [
    "AugmentSpec",
    "FeaturizeConfig",
    "LyndonBasis",
    "ModelSpec",
    "PathStream",
    "TensorSeries",
    "TrainConfig",
    "build_model",
    "count_flops",
    "count_params",
    "evaluate",
    "featurize",
    "featurize_dataset",
    "load_any",
    "load_image",
    "load_model",
    "log_signature",
    "path_signature",
    "quantize",
    "save_model",
    "train",
]
