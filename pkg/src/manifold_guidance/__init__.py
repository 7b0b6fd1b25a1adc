"""Manifold-preserving guided diffusion on synthetic linear-subspace data."""

from .autoencoder import (AutoencoderPair, jacobian_identity_report, perfect_linear_autoencoder,
                          perturbed_autoencoder, projected_gradient)
from .geometry import (LinearManifold, ShellSpec, concentration_epsilon, make_manifold,
                       off_manifold_distance, shell_band_test)
from .losses import LinearInverseLoss, QuadraticLoss
from .prior import (AnalyticDenoiser, GaussianPosterior, MixturePrior, denoiser_jacobian,
                    exact_linear_posterior, noisy_log_density, optimal_denoiser, sample_prior)
from .sampler import NoiseSchedule, TrajectoryRecord, ddim_step, renoise, sigma, tweedie_estimate

__version__ = "0.1.0"
