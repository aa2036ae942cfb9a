from eimlab.denoisers.analytic import GaussianFactorModel, analytic_eps, analytic_posterior, gaussian_factor_model
from eimlab.denoisers.base import Denoiser

__all__ = ["Denoiser", "GaussianFactorModel", "analytic_eps", "analytic_posterior", "gaussian_factor_model"]
