from .features import FEATURE_NAMES, extract_features, feature_matrix
from .fid import GaussianMoments, RandomProjectionEmbedder, fid, frechet_distance
from .stats import (
    CorrelationResult,
    ReconstructionLoss,
    condition_mean_correlation,
    correlation_histogram,
    pearson,
    reconstruction_loss,
    two_sided_t_test,
)
