"""Mean-field prediction of the largest Fisher eigenvalue and the critical
learning rate of random ReLU networks with and without BatchNorm."""
from .arch import ArchSpec, ConfigError, InitSpec, LayerSpec, load_arch, cifar_conv, mnist_fc, parse_arch
from .eigenbound import SpectralReport, critical_learning_rate, gamma_sweep, predict, spectral_report
from .meanfield import LayerOrderParams, OrderParamProfile, run_profile

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ConfigError", "InitSpec", "LayerSpec", "load_arch", "cifar_conv", "mnist_fc",
    "parse_arch", "SpectralReport", "critical_learning_rate", "gamma_sweep", "predict",
    "spectral_report", "LayerOrderParams", "OrderParamProfile", "run_profile",
]
