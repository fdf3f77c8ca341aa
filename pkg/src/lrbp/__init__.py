"""Low-rank bilinear pooling classifiers."""

from .classifier import (
    FullBilinearClassifier,
    FullModel,
    LowRankClassifier,
    LowRankModel,
    MarginExample,
    gradients,
    hinge,
    objective,
    regularizer,
    score_frobenius,
    score_full,
    score_via_pooled,
    spectrum,
    truncate_model,
    truncate_to_lowrank,
)
from .codecomp import (
    CoDecomposedModel,
    codecompose,
    gradients_codecomposed,
    pca_init,
    psnr,
    reconstruction_error,
    score_codecomposed,
)
from .dataio import (
    FeatureDataset,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    synth_covariance_dataset,
)
from .errors import (
    CorruptionError,
    DataError,
    DimensionError,
    FormatError,
    LRBPError,
    ParseError,
    UnsupportedVersionError,
)
from .pooling import FeatureMap, PooledBilinear, bilinear_pool
from .training import TrainConfig, evaluate, sweep, train

__version__ = "0.1.0"
