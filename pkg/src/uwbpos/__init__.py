"""Simulation and estimation toolkit for UWB time-based positioning.

Submodules:

- :mod:`uwbpos.signal` pulses, coded ranging signals, spectral metrics, FCC mask
- :mod:`uwbpos.channel` path loss, shadowing, tapped-delay-line multipath, NLOS bias, AWGN
- :mod:`uwbpos.ranging` TOA / TDOA / AOA / RSS parameter estimation
- :mod:`uwbpos.bounds` Cramer-Rao bounds and capacity
- :mod:`uwbpos.positioning` geometric, statistical and fingerprinting position solvers
- :mod:`uwbpos.harness` scenario files and the Monte-Carlo experiment runner
"""

from uwbpos.constants import SPEED_OF_LIGHT
from uwbpos.errors import (
    DegenerateGeometryError,
    DivergedError,
    EndfireError,
    InconsistentGeometryError,
    MaskCoverageError,
    NoDetectionError,
    ScenarioError,
    UndersampledError,
    UnderdeterminedError,
    UwbError,
)

__version__ = "0.1.0"

__all__ = [
    "SPEED_OF_LIGHT",
    "UwbError",
    "UndersampledError",
    "MaskCoverageError",
    "NoDetectionError",
    "InconsistentGeometryError",
    "EndfireError",
    "DegenerateGeometryError",
    "UnderdeterminedError",
    "DivergedError",
    "ScenarioError",
    "__version__",
]
