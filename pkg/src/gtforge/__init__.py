"""Lidar ground-truth generation: stationary submaps, GICP prior map, NDT localization."""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DegenerateAlignmentError,
    GtForgeError,
    LocalizationLostError,
    MissingInputError,
    NoAssociationError,
    NoDataError,
    NoOverlapError,
    NumericalError,
    SingularSystemError,
    ZeroSegmentsError,
)
from .evaluation import ApeStats, compute_ape, stationary_deviation, umeyama_alignment  # noqa: E402
from .geometry import PointCloud, Pose, StatisticalOutlierRemover, VoxelDownsampler  # noqa: E402
from .ndt import NdtLocalizer, NdtParams  # noqa: E402
from .pipeline import PipelineConfig, generate_ground_truth, run_pipeline  # noqa: E402
from .registration import GicpRegistration, RegParams  # noqa: E402
from .trajectory import Trajectory  # noqa: E402

__all__ = [
    "ApeStats",
    "ConfigError",
    "DataError",
    "DegenerateAlignmentError",
    "GicpRegistration",
    "GtForgeError",
    "LocalizationLostError",
    "MissingInputError",
    "NdtLocalizer",
    "NdtParams",
    "NoAssociationError",
    "NoDataError",
    "NoOverlapError",
    "NumericalError",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "RegParams",
    "SingularSystemError",
    "StatisticalOutlierRemover",
    "Trajectory",
    "VoxelDownsampler",
    "ZeroSegmentsError",
    "compute_ape",
    "generate_ground_truth",
    "run_pipeline",
    "stationary_deviation",
    "umeyama_alignment",
]
