"""Neck, heads, box coding, assignment and losses of the detector."""
from .boxes import (Detection, decode_boxes, encode_boxes, iou, iou_matrix, make_grids, nms,
                    nms_detections, paired_iou, read_detections, write_detections)
from .heads import PAFPN, DecoupledHead, HeadOutput, SCConv
from .losses import (LossBreakdown, Targets, assign_image, assign_targets, detection_loss, focal_loss,
                     focal_loss_with_logits)
from .predict import DEMO_CONF_THRESHOLD, EVAL_CONF_THRESHOLD, NMS_IOU_THRESHOLD, decode_predictions, postprocess
