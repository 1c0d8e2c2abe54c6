from .core import (
    NonFiniteError, Parameter, ShapeError, Tape, TapeNode, Tensor,
    active_tape, is_recording, layer_tag_for, name_scope, no_grad, recording,
)
from .graph import (
    GradientMap, UnknownParameterError, backward, required_set, retained_bytes,
    spatial_nodes, trainable_names,
)
from .gradcheck import CheckReport, NondeterministicClosure, finite_diff_check
from . import ops, snapshot

__all__ = [
    "Tensor", "Parameter", "Tape", "TapeNode", "no_grad", "recording", "name_scope",
    "active_tape", "is_recording", "layer_tag_for", "NonFiniteError", "ShapeError",
    "GradientMap", "UnknownParameterError", "backward", "required_set", "retained_bytes",
    "spatial_nodes", "trainable_names", "CheckReport", "NondeterministicClosure",
    "finite_diff_check", "ops", "snapshot",
]
