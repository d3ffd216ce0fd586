"""labelforge: a few-shot labeled-dataset factory.

Train a small ensemble of per-pixel MLPs on the multi-resolution
features of a generative backbone from a handful of annotated samples,
then mass-synthesize image-annotation pairs, filter the most uncertain
by ensemble Jensen-Shannon disagreement, and drive a human-in-the-loop
coreset selection round over the rest.
"""

from .backbone import (
    GeneratedSample,
    GroundTruth,
    LatentCode,
    ToyBackboneConfig,
    load_feature_dump,
    toy_generate,
    verify_realizability,
    write_feature_dump,
)
from .errors import ConfigError, DataError, DivergenceError, LabelForgeError, UsageError
from .factory import (
    DatasetManifest,
    load_manifest,
    manifest_fingerprint,
    resume,
    synthesize,
    validate_manifest,
)
from .feature_volume import (
    FeatureMap,
    FeatureVolume,
    PixelFeature,
    features_at,
    iter_pixel_features,
    materialize,
    pixel_feature,
    upsample,
)
from .interpreter import (
    AnnotatedSample,
    Heatmap,
    InterpreterEnsemble,
    MlpClassifier,
    TrainConfig,
    forward,
    gaussian_heatmap,
    load_ensemble,
    predict_keypoints,
    predict_segmentation,
    predict_segmentation_with_scores,
    sample_pixels,
    save_ensemble,
    train_ensemble,
)
from .metrics import PckConfig, confusion_matrix, five_fold_select, l2_heatmap, miou, pck
from .schema import LabelSchema
from .selection import (
    PoolEntry,
    SelectionRound,
    first_round_seed,
    kcenter_greedy,
    mean_latent,
    mean_pixel_feature,
    propose_batch,
    uncertainty_band,
)
from .uncertainty import (
    UncertaintyReport,
    entropy,
    filter_by_uncertainty,
    js_divergence,
    keypoint_variance_score,
    score_image,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedSample",
    "ConfigError",
    "DataError",
    "DatasetManifest",
    "DivergenceError",
    "FeatureMap",
    "FeatureVolume",
    "GeneratedSample",
    "GroundTruth",
    "Heatmap",
    "InterpreterEnsemble",
    "LabelForgeError",
    "LabelSchema",
    "LatentCode",
    "MlpClassifier",
    "PckConfig",
    "PixelFeature",
    "PoolEntry",
    "SelectionRound",
    "ToyBackboneConfig",
    "TrainConfig",
    "UncertaintyReport",
    "UsageError",
    "confusion_matrix",
    "entropy",
    "features_at",
    "filter_by_uncertainty",
    "first_round_seed",
    "five_fold_select",
    "forward",
    "gaussian_heatmap",
    "iter_pixel_features",
    "js_divergence",
    "kcenter_greedy",
    "keypoint_variance_score",
    "l2_heatmap",
    "load_ensemble",
    "load_feature_dump",
    "load_manifest",
    "manifest_fingerprint",
    "materialize",
    "mean_latent",
    "mean_pixel_feature",
    "miou",
    "pck",
    "pixel_feature",
    "predict_keypoints",
    "predict_segmentation",
    "predict_segmentation_with_scores",
    "propose_batch",
    "resume",
    "sample_pixels",
    "save_ensemble",
    "score_image",
    "synthesize",
    "toy_generate",
    "train_ensemble",
    "uncertainty_band",
    "upsample",
    "validate_manifest",
    "verify_realizability",
    "write_feature_dump",
]
