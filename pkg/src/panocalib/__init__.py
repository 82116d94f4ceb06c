"""Test-time calibration of panoramic depth from geometric self-consistency.

Modules:

- ``geometry``, ``io``: equirectangular conventions, depth rasters, file formats
- ``stretch``, ``synth``: panorama stretching and novel-view warping
- ``losses``, ``calibration``: self-consistency losses and the correction fit
- ``predictor``, ``scenegen``: oracle predictors and ray-cast ground truth
- ``mapping``, ``localization``, ``metrics``: downstream harnesses and scores
"""
from __future__ import annotations

__version__ = "0.1.0"

from .calibration import CalibConfig, CalibratedPredictor, CorrectionParams, calibrate_offline
from .geometry import DepthMap, Panorama, Pose
from .kernels import BACKEND
from .losses import LossConfig, total_loss
from .predictor import CorruptionSpec, OraclePredictor

__all__ = [
    "BACKEND",
    "CalibConfig",
    "CalibratedPredictor",
    "CorrectionParams",
    "CorruptionSpec",
    "DepthMap",
    "LossConfig",
    "OraclePredictor",
    "Panorama",
    "Pose",
    "__version__",
    "calibrate_offline",
    "total_loss",
]
