"""Transient-stability simulation and power-splitting-index islanding prediction."""
from .grid import NetworkCase, ieee39, load_case, load_case_file
from .kernels import BACKEND
from .powerflow import init_classical, solve_power_flow

__version__ = "0.1.0"

__all__ = ["BACKEND", "NetworkCase", "ieee39", "init_classical", "load_case", "load_case_file",
           "solve_power_flow", "__version__"]
