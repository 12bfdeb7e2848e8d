"""Simulation and verification toolkit for multi-species spherical mixed p-spin models."""

from .geometry import BandSpec, Configuration
from .hamiltonian import HamiltonianInstance, build_instance
from .mixture import Mixture, OverlapVector, SpeciesLayout
from .thermo import FreeEnergyEstimate, GibbsChainState, PTResult

__version__ = "0.1.0"

__all__ = [
    "BandSpec",
    "Configuration",
    "FreeEnergyEstimate",
    "GibbsChainState",
    "HamiltonianInstance",
    "Mixture",
    "OverlapVector",
    "PTResult",
    "SpeciesLayout",
    "build_instance",
    "__version__",
]
