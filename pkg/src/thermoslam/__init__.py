"""Stereo thermal SLAM: preprocessing, binary-descriptor features, dynamic
point filtering, dual-level tracking, sparse bundle adjustment, incremental
bag-of-words loop closing, and a synthetic evaluation harness.
"""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config, save_config
from .errors import ThermoSlamError
from .evalsim import Trajectory, compute_metrics, load_tum, save_tum
from .geometry import Intrinsics, PoseSE3, Sim3, StereoRig
from .pipeline import RunResult, SlamEngine, run_slam

__all__ = [
    "__version__",
    "PipelineConfig",
    "load_config",
    "save_config",
    "ThermoSlamError",
    "Trajectory",
    "compute_metrics",
    "load_tum",
    "save_tum",
    "Intrinsics",
    "PoseSE3",
    "Sim3",
    "StereoRig",
    "RunResult",
    "SlamEngine",
    "run_slam",
]
