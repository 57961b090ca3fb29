"""Token-labeling training for a miniature fully-attentional vision transformer.

Two-stage pipeline: train a token labeler whose patch-token outputs develop
semantically meaningful class labels, then train a student against those
labels (filtered through Gumbel-Softmax) alongside the ordinary class loss.
Everything runs on a small hand-rolled reverse-mode autodiff core so the
whole pipeline is inspectable and reproducible on a CPU.
"""

__version__ = "0.1.0"

from .errors import FormatError, ShapeError, StateError, ValidationError

__all__ = [
    "FormatError",
    "ShapeError",
    "StateError",
    "ValidationError",
    "__version__",
]
