"""semsplat: CPU reference engine for online semantic Gaussian splatting SLAM."""

from .core import (CameraIntrinsics, CameraPose, Codebook, FeatureReservoir,
                   Gaussian, GaussianField, covariance_from_parts,
                   decode_feature, mixture_weights, project_covariance)
from .rasterizer import (CompactFeatureMap, RasterConfig, RenderOutput,
                         feature_gradients, render, render_features_dense,
                         render_features_grid)
from .supervision import (ContinuousFeatureSource, GridSpec, RegionAnnotation,
                          SupervisionTarget, build_target_continuous,
                          build_target_discrete, grid_resolution,
                          masked_semantic_loss, next_offset, sample_coordinates)
from .vq import VqConfig, accumulate, assign, ema_step, revive_dead_codes, warm_start

__version__ = "0.1.0"
