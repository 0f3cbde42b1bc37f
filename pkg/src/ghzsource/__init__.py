"""Simulation and analysis of a two-layer pair source fused into a four-photon GHZ state."""
from .polarization import (
    DensityMatrix,
    LocalUnitary,
    PureState,
    WaveplateSetting,
    apply_local_unitaries,
    bell_pair_state,
    fidelity,
    ghz_state,
    waveplate_jones,
)

__all__ = [
    "DensityMatrix",
    "LocalUnitary",
    "PureState",
    "WaveplateSetting",
    "apply_local_unitaries",
    "bell_pair_state",
    "fidelity",
    "ghz_state",
    "waveplate_jones",
]
__version__ = "0.1.0"
