"""Detection-aware post-processing for coded video.

A small residual-in-residual dense network restores decoded frames so
that a downstream object detector sees features close to those of the
originals. The package covers the full loop: coding a sequence at a
ladder of quality levels, training the restorer against detector
features, and measuring detection accuracy against bitrate.
"""
from .checkpoint import load_network, save_network
from .codec import (
    encode_decode_external,
    measure_bitrate,
    mock_codec,
    mock_codec_yuv,
    rgb_to_yuv420,
    yuv420_to_rgb,
)
from .detector import Detection, ToyBackend, detect, extract_features, make_backend
from .errors import VcmpostError
from .estimator import FeatureGuidedRestorer
from .frames import VideoSequence, check_frame, check_frame_stack
from .metrics import (
    average_precision,
    build_rate_curve,
    f1_at_threshold,
    iou,
    match_detections,
    mean_ap,
)
from .net import NetConfig, PostProcNet, build_network, forward
from .training import TrainConfig, adam_update, feature_loss, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "FeatureGuidedRestorer",
    "NetConfig",
    "PostProcNet",
    "ToyBackend",
    "TrainConfig",
    "VcmpostError",
    "VideoSequence",
    "adam_update",
    "average_precision",
    "build_network",
    "build_rate_curve",
    "check_frame",
    "check_frame_stack",
    "detect",
    "encode_decode_external",
    "extract_features",
    "f1_at_threshold",
    "feature_loss",
    "forward",
    "iou",
    "load_network",
    "make_backend",
    "match_detections",
    "mean_ap",
    "measure_bitrate",
    "mock_codec",
    "mock_codec_yuv",
    "rgb_to_yuv420",
    "save_network",
    "train",
    "train_step",
    "yuv420_to_rgb",
    "__version__",
]
