"""Joint stereo-video deblurring and piecewise-rigid scene-flow estimation."""

from .errors import (
    BehindCameraError,
    ConfigError,
    DataError,
    GeometryError,
    InitializationError,
    PointAtInfinityError,
    SfdError,
    SingularHomographyError,
    SolverDivergenceError,
    SolverError,
    UndefinedMetricError,
)
from .geometry import CameraRig, Plane, RigidMotion
from .scenestate import SceneFlowState
from .sceneflow import EnergyParams, optimize_scene_flow, total_energy
from .deblur import pd_energy, primal_dual_deblur
from .pipeline import (
    MetricsReport,
    PipelineConfig,
    build_operators,
    disparity_outlier_rate,
    flow_outlier_rate,
    initialize,
    joint_estimate,
)
from .window import (
    REFERENCE_VIEW,
    DisparityMap,
    FlowField,
    StereoWindow,
    View,
)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "CameraRig",
    "ConfigError",
    "DataError",
    "DisparityMap",
    "EnergyParams",
    "FlowField",
    "GeometryError",
    "InitializationError",
    "MetricsReport",
    "PipelineConfig",
    "Plane",
    "PointAtInfinityError",
    "REFERENCE_VIEW",
    "RigidMotion",
    "SceneFlowState",
    "SfdError",
    "SingularHomographyError",
    "SolverDivergenceError",
    "SolverError",
    "StereoWindow",
    "UndefinedMetricError",
    "View",
    "build_operators",
    "disparity_outlier_rate",
    "flow_outlier_rate",
    "initialize",
    "joint_estimate",
    "optimize_scene_flow",
    "pd_energy",
    "primal_dual_deblur",
    "total_energy",
]
