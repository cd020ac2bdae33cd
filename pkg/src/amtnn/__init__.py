"""Adversarial multitask neural network with learned task relation coefficients."""
from .kernels import BACKEND

__version__ = "0.1.0"
