"""Visually-aware rating prediction: MF, VMF, VMLP and the fused MF-VMLP."""

from vizrec.models import ModelKind, ModelParams

__version__ = "0.1.0"

__all__ = ["ModelKind", "ModelParams", "__version__"]
