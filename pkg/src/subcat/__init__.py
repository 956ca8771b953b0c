"""Subcategory-aware vehicle detection toolkit.

Clusters training instances on 3-D geometric and visual appearance
features, trains one fast boosted channel-feature detector per
subcategory (optionally at several model resolutions), pools the ensemble
with greedy NMS, estimates observation angles from ensemble score
vectors, and scores everything under the KITTI evaluation protocol.
"""

from .annotations import (
    Annotation3D,
    BBox2D,
    GeoFeatures,
    Occlusion,
    geometric_features,
    observation_angle,
    parse_kitti_label,
    serialize_kitti_label,
    wrap_angle,
)
from .boosting import BoostedModel, DepthTwoTree, TrainConfig, adaboost_train, train_tree
from .channels import ChannelPyramid, ChannelStack, build_pyramid, compute_stack
from .clustering import (
    ClusterModel,
    DiscriminativeSubcategorization,
    KMeans,
    SpectralClustering,
    Strategy1Binning,
)
from .detector import Detection, EnsembleSpec, detect_ensemble, nms_greedy, overlap
from .evaluation import EvalSettings, eval_settings, match, miss_rate_at_fppi, pr_curve
from .linear_models import CrammerSingerSVM, L2LossSVR, LinearSVM
from .orientation import OrientationModel, orientation_similarity, train_orientation
from .synth import SynthSpec, generate_dataset, render_scene

__version__ = "0.1.0"

__all__ = [
    "Annotation3D", "BBox2D", "GeoFeatures", "Occlusion",
    "geometric_features", "observation_angle", "parse_kitti_label",
    "serialize_kitti_label", "wrap_angle",
    "BoostedModel", "DepthTwoTree", "TrainConfig", "adaboost_train", "train_tree",
    "ChannelPyramid", "ChannelStack", "build_pyramid", "compute_stack",
    "ClusterModel", "DiscriminativeSubcategorization", "KMeans",
    "SpectralClustering", "Strategy1Binning",
    "Detection", "EnsembleSpec", "detect_ensemble", "nms_greedy", "overlap",
    "EvalSettings", "eval_settings", "match", "miss_rate_at_fppi", "pr_curve",
    "CrammerSingerSVM", "L2LossSVR", "LinearSVM",
    "OrientationModel", "orientation_similarity", "train_orientation",
    "SynthSpec", "generate_dataset", "render_scene",
    "__version__",
]
