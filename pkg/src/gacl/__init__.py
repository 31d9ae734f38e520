"""Classification layer that reads per-sample quality off the feature
magnitude, with soft binning, gradient-direction verification, label
cleansing, stroke attribution, and latent quality steering on top."""

from .binning import BinningSchedule, BinningSpec, make_cutpoints, soft_bin
from .checkpoint import load_classifier, load_vae, save_classifier, save_vae
from .datagen import (GaussianMixtureSpec, LabeledSet, SketchSequence,
                      bin_ratings, gen_gaussians, gen_sketch_set,
                      inject_label_noise, pseudo_label)
from .errors import (ConfigError, DataError, DimensionError, DomainError,
                     GaclError, StateError, TrainingDiverged)
from .head import (INSTANTIATIONS, ClassPrototypes, HeadConfig,
                   QualityCalibration, gacl_loss, head_backward, head_forward,
                   lambda_bound, normalize_quality, preset, regulariser,
                   scale_quality)
from .steer import (ToyVae, VaeConfig, latent_step, reconstruct_set, steer,
                    train_vae)
from .trainer import (EvalResult, TrainConfig, TrainedArtifacts, evaluate,
                      train)
from .verify import finite_diff_suite, verify_config

__version__ = "0.1.0"

__all__ = [
    "BinningSchedule", "BinningSpec", "make_cutpoints", "soft_bin",
    "load_classifier", "load_vae", "save_classifier", "save_vae",
    "GaussianMixtureSpec", "LabeledSet", "SketchSequence", "bin_ratings",
    "gen_gaussians", "gen_sketch_set", "inject_label_noise", "pseudo_label",
    "ConfigError", "DataError", "DimensionError", "DomainError", "GaclError",
    "StateError", "TrainingDiverged",
    "INSTANTIATIONS", "ClassPrototypes", "HeadConfig", "QualityCalibration",
    "gacl_loss", "head_backward", "head_forward", "lambda_bound",
    "normalize_quality", "preset", "regulariser", "scale_quality",
    "ToyVae", "VaeConfig", "latent_step", "reconstruct_set", "steer",
    "train_vae",
    "EvalResult", "TrainConfig", "TrainedArtifacts", "evaluate", "train",
    "finite_diff_suite", "verify_config",
]
