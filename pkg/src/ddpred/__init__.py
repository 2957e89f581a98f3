"""Delay-Doppler channel datasets, a flow-enhanced conditional VAE channel
predictor, reference baselines and NMSE benchmarks."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
