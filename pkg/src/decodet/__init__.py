"""Post-backbone pipeline of a decoupled large-vocabulary object detector.

Super-class discovery, position-sensitive RoI pooling, objectness times
classification scoring, label assignment and losses, clustered NMS,
multi-scale fusion and mAP evaluation, all runnable on synthetic maps.
"""

__version__ = "0.1.0"

from .geometry import BBox, ImageExtent, RegressionDelta, area, decode, encode, iou, iou_matrix
from .taxonomy import ClassRepresentation, Taxonomy, build_taxonomy, class_representations, kmeans
from .heads import (
    FeatureMap,
    HeadConfig,
    RoIScores,
    classify_roi,
    combine_scores,
    psroi_pool,
    rpn_objectness_mode,
    score_roi,
    score_rois,
)
from .targets import (
    GroundTruth,
    LossReport,
    RoITarget,
    RpnLabel,
    TargetSet,
    assign_detection_labels,
    assign_rpn_labels,
    ohem_select,
    smooth_l1,
    total_loss,
)
from .anchors import AnchorConfig, generate_anchors
from .postprocess import Detection, NmsClusters, clustered_nms, multiscale_merge, nms, topk_filter
from .evaluation import EvalConfig, EvalReport, average_precision, class_ap, mean_ap
from .config import PipelineConfig
from .formats import DataError, read_tensor, write_tensor
