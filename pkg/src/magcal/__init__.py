"""magcal: magnetometer + IMU calibration by maximum likelihood.

Estimates a 3x3 distortion matrix, a 3x1 offset, the local magnetic field,
the gyroscope bias and the sensor noise covariances from a recording of a
slowly rotated sensor, by minimizing the negative log-likelihood of an
orientation EKF's one-step-ahead predictor.  Initial values come from an
ellipsoid fit plus a misalignment estimate, and a Monte Carlo harness
quantifies the heading-accuracy gain of the refinement.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationConfig,
    CalibrationError,
    CalibrationResult,
    ValidationResult,
    calibrate,
    validate_on,
)
from .ekf import EkfConfig, EkfNumericalError, EkfRun, ekf_run, nll_cost
from .evaluate import (
    HeadingTable,
    ResidualStats,
    ninety_degree_table,
    norm_profile,
    residual_stats,
    triad,
)
from .initialization import (
    EllipsoidQuadric,
    InitialEstimate,
    build_initial,
    estimate_misalignment,
    fit_ellipsoid,
    initial_noise_estimates,
    recover_cal,
)
from .models import (
    CalibrationParams,
    ImuDataset,
    ImuSample,
    LocalField,
    MagCalibration,
    NoiseModel,
    apply_calibration,
    correct_gyro,
    field_from_dip,
    field_from_vertical,
    model_accel,
    model_mag,
    pack_params,
    unpack_params,
)
from .optimize import (
    OptimizerConfig,
    OptTrace,
    backtracking_line_search,
    bfgs_update_damped,
    minimize,
    numerical_gradient,
)
from .simulate import (
    McRecord,
    SimConfig,
    SimScenario,
    generate_measurements,
    generate_trajectory,
    heading_rmse,
    make_scenario,
    run_monte_carlo,
    sample_true_params,
)
from .io import (
    DataFormatError,
    ReportDocument,
    load_imu_csv,
    load_report,
    write_imu_csv,
    write_mc_table,
    write_report,
)
