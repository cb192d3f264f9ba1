"""dualflow: a two-stage motion model.

Stage I measures local motion energy with a bank of spatiotemporal filters
(plus an optional higher-order channel); Stage II integrates it over a
self-attention motion graph with a gated recurrent update.
"""

__version__ = "0.1.0"

from dualflow.errors import DualflowError
from dualflow.flow import FlowField
from dualflow.model import DualflowModel, ModelOutput
from dualflow.stimuli import StimulusSequence

__all__ = [
    "DualflowError",
    "DualflowModel",
    "FlowField",
    "ModelOutput",
    "StimulusSequence",
]
