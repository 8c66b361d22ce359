"""Spatially-aware conformal prediction sets for multi-class image segmentation.

Score samples of a segmentation model are summarised per image by their mean
and top principal directions; label maps reachable by argmax over a
lambda-scaled box of direction coefficients form the prediction set, and
lambda is calibrated by conformal risk control. A pixel-wise APS baseline,
set samplers and set-size metrics are included for comparison.
"""

__version__ = "0.1.0"

from .aps import PixelLabelSets, aps_sets, pw_log_volume, pw_membership
from .calibration import (
    CalibConfig,
    CalibrationRecord,
    calibrate,
    calibrate_aps,
    calibrate_consign,
    crc_threshold,
)
from .dataset_io import SynthConfig, generate_synthetic, load_dataset, synthesize
from .metrics import avg_correlation, chao_estimate, sec
from .prediction import SolverConfig, approx_solve, beta_agreement, project_labels, solver_loss
from .sampling import SampleSet, sample_consign, sample_pw
from .spatial_basis import CoeffBox, SpatialBasis, compute_basis, scale_box

__all__ = [
    "CalibConfig",
    "CalibrationRecord",
    "CoeffBox",
    "PixelLabelSets",
    "SampleSet",
    "SolverConfig",
    "SpatialBasis",
    "SynthConfig",
    "approx_solve",
    "aps_sets",
    "avg_correlation",
    "beta_agreement",
    "calibrate",
    "calibrate_aps",
    "calibrate_consign",
    "chao_estimate",
    "compute_basis",
    "crc_threshold",
    "generate_synthetic",
    "load_dataset",
    "project_labels",
    "pw_log_volume",
    "pw_membership",
    "sample_consign",
    "sample_pw",
    "scale_box",
    "sec",
    "solver_loss",
    "synthesize",
]
