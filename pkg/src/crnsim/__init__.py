"""Cognitive-radio network simulator.

Reduced-complexity decision-directed OFDM channel estimation (PHY) coupled
to a channel-endorsement MAC protocol through a deterministic discrete-event
core.
"""

from .baseband import Cir, apply_channel, cir_to_ctf, generate_cir
from .errors import InvalidState, NumericalFailure
from .estimators import ESTIMATORS, EstimatorParams, PilotPattern
from .transforms import MultCounter

__version__ = "0.1.0"

__all__ = [
    "Cir",
    "ESTIMATORS",
    "EstimatorParams",
    "InvalidState",
    "MultCounter",
    "NumericalFailure",
    "PilotPattern",
    "apply_channel",
    "cir_to_ctf",
    "generate_cir",
]
