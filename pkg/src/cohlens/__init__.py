"""Differentiable sequential ray tracing with a coherent PSF model."""

from .geometry import Surface
from .losses import DesignSpec, loss_optic
from .materials import AIR, CATALOG, DispersionModel, refractive_index
from .prescription import emit_prescription, load_prescription, parse_prescription, read_prescription
from .system import LensSystem
from .trace import FieldSpec, paraxial_effl

__all__ = [
    "AIR",
    "CATALOG",
    "DesignSpec",
    "DispersionModel",
    "FieldSpec",
    "LensSystem",
    "Surface",
    "emit_prescription",
    "load_prescription",
    "loss_optic",
    "paraxial_effl",
    "parse_prescription",
    "read_prescription",
    "refractive_index",
]
