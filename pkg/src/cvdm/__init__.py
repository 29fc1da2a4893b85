"""Conditional diffusion models with a learned, condition-dependent variance
schedule, trained jointly with the noise predictor under a regularized
variational objective; includes the synthetic phase-imaging data pipeline and
the discretization-gap study that motivates the regularizer.
"""

from .denoiser import DenoiserModel, OracleDenoiser, predict_noise
from .diffusion import (eps_from_target, posterior_params, posterior_params_at,
                        predict_y_from_eps, sample_forward, transition_params)
from .errors import DomainError, NonFiniteError, SingularityError
from .losses import (AlphaPolicy, LossBreakdown, kl_prior, loss_beta,
                     loss_diffusion_hat, loss_gamma_reg, loss_total)
from .metrics import MetricReport, evaluate_pairs, mae, ms_ssim, psnr, ssim
from .qpi import (OpticalConfig, PairedSample, fresnel_propagate,
                  intensity_derivative, make_pair, make_toy_blur_pair)
from .sampler import SamplerConfig, SampleStack, sample, sample_batch
from .schedule import (AnalyticSchedule, ScheduleModel, discretize,
                       schedule_report_table)
from .trainer import TrainConfig, build_models, train_loop, train_step

__version__ = "0.1.0"

__all__ = [
    "AlphaPolicy", "AnalyticSchedule", "DenoiserModel", "DomainError",
    "LossBreakdown", "MetricReport", "NonFiniteError", "OpticalConfig",
    "OracleDenoiser", "PairedSample", "SampleStack", "SamplerConfig",
    "ScheduleModel", "SingularityError", "TrainConfig", "build_models",
    "discretize", "eps_from_target", "evaluate_pairs", "fresnel_propagate",
    "intensity_derivative", "kl_prior", "loss_beta", "loss_diffusion_hat",
    "loss_gamma_reg", "loss_total", "mae", "make_pair", "make_toy_blur_pair",
    "ms_ssim", "posterior_params", "posterior_params_at", "predict_noise",
    "predict_y_from_eps", "psnr", "sample", "sample_batch", "sample_forward",
    "schedule_report_table", "ssim", "train_loop", "train_step",
    "transition_params",
]
