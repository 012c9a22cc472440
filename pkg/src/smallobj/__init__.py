"""Small-object detection building blocks: CBAM, DCM, multi-level fusion,
a decoupled YOLOv3 head, CIoU Soft-NMS and COCO-style evaluation, on numpy."""

from .arch import ModelConfig, decode_predictions, init_model, model_forward
from .cbam import cbam_apply
from .dcm import dcm_forward
from .metrics import EvalReport, GroundTruth, average_precision_11pt, evaluate
from .postprocess import BBox, Detection, SoftNmsConfig, ciou_metric, iou, nms_hard, soft_nms

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "EvalReport", "GroundTruth", "ModelConfig", "SoftNmsConfig",
    "average_precision_11pt", "cbam_apply", "ciou_metric", "dcm_forward", "decode_predictions",
    "evaluate", "init_model", "iou", "model_forward", "nms_hard", "soft_nms",
]
