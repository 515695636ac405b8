"""Flow-aligned, curriculum depth-fused semantic scene completion (forward pass, numpy)."""

from flowocc.errors import InputError, PipelineError, ShapeError

EMPTY = 0
IGNORE = 255

__all__ = ["EMPTY", "IGNORE", "InputError", "PipelineError", "ShapeError"]
__version__ = "0.1.0"
