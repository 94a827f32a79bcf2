"""Occupancy fields from point clouds, isosurfaces, and contraction skeletons."""
from .config import PipelineConfig
from .errors import OccSkelError
from .evalkit import (CompressionReport, MetricsReport, chamfer_l1, chamfer_l2,
                      compression_report, hausdorff, metrics_report)
from .occnet import (NetworkArchitecture, NetworkParameters, init_network, load_checkpoint,
                     margin_uncertainty, occupancy, save_checkpoint)
from .pcio import (NormalizationTransform, PointCloud, SpatialIndex, load_point_cloud, normalize,
                   save_point_cloud)
from .skeletor import ContractionConfig, SkeletonGraph, contract, extract_skeleton
from .surfacer import (GridField, TriangleMesh, evaluate_grid, marching_cubes, median_threshold,
                       sample_surface_points)
from .trainer import TrainingConfig, TrainingLog, fit

__version__ = "0.1.0"
