"""Point-cloud geometric quality: eigenvalue features, aggregates and a score."""

from .features import FEATURES, compute_features, local_eigenvalues
from .io import read_point_cloud, write_ply, write_xyz
from .metrics import FeatureStats, LinearModel, aggregate, cloud_metrics, format_table, histogram_entropy, overall_score

__all__ = [
    "FEATURES",
    "FeatureStats",
    "LinearModel",
    "aggregate",
    "cloud_metrics",
    "compute_features",
    "format_table",
    "histogram_entropy",
    "local_eigenvalues",
    "overall_score",
    "read_point_cloud",
    "write_ply",
    "write_xyz",
]
