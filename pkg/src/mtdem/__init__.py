"""Approximate EM for 2-D multi-target detection.

Modules: ``basis`` (steerable Fourier-Bessel basis), ``sim`` (measurement
generator and MTD2 files), ``em`` (the estimator), ``evaluation`` (error
metric and sweeps) and ``cli``.
"""

from .basis import BasisSpec, BasisTable, CoeffVec, build_basis, build_index_set, project, steer, synthesize
from .em import EmConfig, EmState, run_em
from .evaluation import fit, rotation_error
from .sim import Measurement, SimConfig, generate, read_measurement, write_measurement

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "BasisTable",
    "CoeffVec",
    "EmConfig",
    "EmState",
    "Measurement",
    "SimConfig",
    "build_basis",
    "build_index_set",
    "fit",
    "generate",
    "project",
    "read_measurement",
    "rotation_error",
    "run_em",
    "steer",
    "synthesize",
    "write_measurement",
]
