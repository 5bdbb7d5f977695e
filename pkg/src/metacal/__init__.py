"""Meta-learned, calibrated few-shot regression with deep-kernel GPs."""

from .calibration import (
    AdaptedTask,
    CalibratedCdf,
    CdfModel,
    ConvergenceError,
    EmpiricalCalibrator,
    FunctionCdf,
    GaussianCdf,
    GmmCalibrator,
    Variant,
    adapt,
    apply_r,
    apply_r_emp,
    calibrated_cdf,
    fit_empirical_calibrator,
    fit_gmm_calibrator,
    invert_cdf,
)
from .data import (
    CsvSchema,
    Standardizer,
    TaskCollection,
    TaskDataset,
    gen_gp_tasks,
    gen_sine_tasks,
    load_csv_multitask,
    split_tasks,
    standardize,
    write_csv_multitask,
)
from .losses import (
    EvalReport,
    calibration_loss,
    ece,
    evaluate_task,
    regression_loss,
    total_error,
    total_loss,
)
from .model import (
    PosteriorPrediction,
    SharedParams,
    encode,
    gp_posterior,
    init_params,
    kernel,
    load_checkpoint,
    save_checkpoint,
    uncalibrated_cdf,
)
from .trainer import Adam, Episode, TrainConfig, TrainTrace, meta_train, sample_episode, train_step

__version__ = "0.1.0"
