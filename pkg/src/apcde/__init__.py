"""Conditional density estimation with normalizing flows whose latent base
is an augmented posterior over a predictive block z_P."""
from .base import AugmentedBase, CategoricalHead, LinearGaussianHead, apcde_loss, log_aug_posterior
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, MixtureSpec, XSpec, load_dataset, load_digits_8x8, save_dataset, synth_conditional_mixture
from .errors import (APCDEError, ArgumentError, CheckpointError, ConfigurationError, DataError,
                     DegenerateDataError, DivergenceError, NumericalError, SchemaError, SingularMatrixError)
from .flows import FlowModel, LatentLayout
from .inference import (bits_per_dim, class_marginals, classify, density_report, embed, generate_fixed_zp,
                        log_cond_density, log_marg_density, sample_uncond)
from .sdr import ProbeConfig, sdr_agreement, train_probe
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"
