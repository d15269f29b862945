"""Mesh-initialized Gaussian splatting on the CPU.

Delaunay-tetrahedral initialization, a differentiable tile rasterizer,
importance pruning with curvature-aware densification, and K-Means codebook
compression.
"""

__version__ = "0.1.0"

from .errors import TetraSplatError
from .scene import Camera, Gaussian, SceneModel, covariance, evaluate_gaussian
from .mesh import TetraMesh, delaunay_tetrahedralize, init_gaussians_on_faces
from .raster import rasterize, rasterize_backward
from .train import TrainConfig, TrainReport, train
