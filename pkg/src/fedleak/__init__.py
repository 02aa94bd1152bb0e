"""Federated speech-emotion-recognition privacy-leakage simulator.

User-level differential privacy for FedAvg and a shadow-model attack that
infers speaker gender from the first-layer update each client uploads.
"""
from .errors import ConfigError, DataError, DomainError, FedLeakError, InvariantError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "DataError", "DomainError", "FedLeakError", "InvariantError",
           "__version__"]
