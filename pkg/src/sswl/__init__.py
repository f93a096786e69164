"""Self-supervised window-leveling lab for low-dose CT denoising."""

from .dataio import (
    CTSlice,
    DatasetSplit,
    DoseLevel,
    NormalizationSpec,
    ScanManifest,
    SliceEntry,
    make_splits,
    normalize_hu,
    read_slice,
    resize_bilinear,
    write_slice,
)
from .dosesim import (
    NoiseField,
    NoiseScaleModel,
    extract_noise,
    generate_phantom_pair,
    noise_scale_factor,
    synthesize_dose,
)
from .losses import LossBreakdown, LossWeights, hybrid_loss, kl_loss, mse_loss, perceptual_loss
from .metrics import (
    MetricReport,
    TTestResult,
    aggregate,
    evaluate_pair,
    mse,
    nrmse,
    psnr,
    ssim,
    welch_t_test,
)
from .model import (
    RVAE,
    FeatureExtractor,
    FeatureExtractorSpec,
    LatentSample,
    RVAEConfig,
    build_rvae,
    gradients,
    init_params,
    make_feature_extractor,
    parameter_count,
)
from .training import (
    PretextTask,
    TrainConfig,
    TrainState,
    build_denoise_pairs,
    build_pretext_pairs,
    load_train_state,
    run_sswl_idn,
    save_train_state,
    train_phase,
)
from .windowing import AffineWindow, WindowSpec, apply_window_level, window_to_affine

__version__ = "0.1.0"

__all__ = [
    "AffineWindow",
    "CTSlice",
    "DatasetSplit",
    "DoseLevel",
    "FeatureExtractor",
    "FeatureExtractorSpec",
    "LatentSample",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "NoiseField",
    "NoiseScaleModel",
    "NormalizationSpec",
    "PretextTask",
    "RVAE",
    "RVAEConfig",
    "ScanManifest",
    "SliceEntry",
    "TTestResult",
    "TrainConfig",
    "TrainState",
    "WindowSpec",
    "aggregate",
    "apply_window_level",
    "build_denoise_pairs",
    "build_pretext_pairs",
    "build_rvae",
    "evaluate_pair",
    "extract_noise",
    "generate_phantom_pair",
    "gradients",
    "hybrid_loss",
    "init_params",
    "kl_loss",
    "load_train_state",
    "make_feature_extractor",
    "make_splits",
    "mse",
    "mse_loss",
    "noise_scale_factor",
    "normalize_hu",
    "nrmse",
    "parameter_count",
    "perceptual_loss",
    "psnr",
    "read_slice",
    "resize_bilinear",
    "run_sswl_idn",
    "save_train_state",
    "ssim",
    "synthesize_dose",
    "train_phase",
    "welch_t_test",
    "window_to_affine",
    "write_slice",
]
