"""Vertebra identification and localization in volumetric images.

A multi-task 3D CNN classifies fixed-size crops and regresses the centroid
inside them; its dense (fully convolutional) form scans whole volumes, and a
stacked bidirectional LSTM relabels the resulting spatially ordered feature
sequence. Everything runs on numpy with hand-written gradients.
"""
from .config import RunConfig, desk_scale, load_config
from .data import (AnnotationSet, PhantomSpec, Volume, decode_label, encode_label, load_volume,
                   resample, save_volume, synth_phantom)
from .evaluate import aggregate, identification_metrics, predict_volume, sample_metrics
from .net import (CnnArch, build_cnn, cnn_forward, convert_to_fcn, dense_predict, fcn_forward,
                  map_to_image)
from .sequence import BiRnnArch, birnn_forward, build_birnn, build_feature_sequence, train_birnn
from .train import train_cnn

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet", "BiRnnArch", "CnnArch", "PhantomSpec", "RunConfig", "Volume",
    "aggregate", "birnn_forward", "build_birnn", "build_cnn", "build_feature_sequence",
    "cnn_forward", "convert_to_fcn", "decode_label", "dense_predict", "desk_scale",
    "encode_label", "fcn_forward", "identification_metrics", "load_config", "load_volume",
    "map_to_image", "predict_volume", "resample", "sample_metrics", "save_volume",
    "synth_phantom", "train_birnn", "train_cnn",
]
