"""Structure-from-motion loss engine with a synthetic-scene harness."""

from .errors import (
    BehindCameraError,
    CodecError,
    ConfigError,
    DegenerateGeometryError,
    DegenerateMaskError,
    DimensionError,
    DivergedError,
    EmptyContextError,
    InvalidDepthError,
    LossKitError,
    NoSupervisionError,
)
from .geometry import (
    CameraIntrinsics,
    PixelCoord,
    Point3D,
    PoseSE3,
    project,
    transform,
    unproject,
    warp_coords,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    automask,
    baseline_berhu,
    baseline_l1,
    min_photometric,
    photometric,
    reprojected_distance,
    smoothness,
    ssim,
    total_loss,
    total_loss_grad,
)
from .metrics import DepthMetrics, evaluate
from .optimize import OptimConfig, OptimState, gradcheck, run, step
from .supervision import DecimationSpec, SparseDepth, decimate, median_scale, synth_lidar
from .synth import Scene, SceneSpec, make_scene, render_view
from .warp import sample_bilinear, sample_bilinear_grad

__version__ = "0.1.0"
