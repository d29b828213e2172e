"""Anchor-free dense box detection on a small numpy autodiff engine."""

from .geometry import BBox, Detection, iou, nms
from .groundtruth import GeometryConfig, GroundTruthMap, ObjectAnnotation, encode_patch
from .inference import PyramidConfig, decode_map, detect, pyramid_scales
from .model import ModelConfig, OptimizerConfig, build_model, load_model, train_step
from .sampling import LossWeights, MiningConfig, detection_loss, full_loss, mine_and_select

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "iou", "nms",
    "GeometryConfig", "GroundTruthMap", "ObjectAnnotation", "encode_patch",
    "PyramidConfig", "decode_map", "detect", "pyramid_scales",
    "ModelConfig", "OptimizerConfig", "build_model", "load_model", "train_step",
    "LossWeights", "MiningConfig", "detection_loss", "full_loss", "mine_and_select",
]
