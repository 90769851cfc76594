"""Wavelet-sparse trainable FDK reconstruction for circular cone-beam CT."""

from .core import ContainerError, Geometry, GeometryError, ProjectionStack, Volume
from .model import FdkModel, SparseWaveletParams, init_from_classical

__all__ = [
    "ContainerError",
    "FdkModel",
    "Geometry",
    "GeometryError",
    "ProjectionStack",
    "SparseWaveletParams",
    "Volume",
    "init_from_classical",
]
__version__ = "0.1.0"
