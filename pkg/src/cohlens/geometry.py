"""Rotationally symmetric refracting surfaces.

Sag of an even asphere::

    z(r) = c r² / (1 + sqrt(1 - (1+k) c² r²)) + sum_i a_i r^(2i),  i = 1..8

The profile helpers take the shape parameters explicitly so they can be
evaluated with plain floats or with taped :class:`~cohlens.adjoint.Var`
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import adjoint as ad
from .materials import AIR, DispersionModel

STANDARD = "standard"
EVEN_ASPHERE = "even_asphere"
N_ASPHERE = 8

PARAM_KINDS = ("c", "d", "k") + tuple(f"a{i}" for i in range(1, N_ASPHERE + 1))


class SagDomainError(ValueError):
    """The conic square root has a non-positive argument."""


@dataclass(frozen=True)
class Surface:
    curvature: float = 0.0
    thickness: float = 0.0
    semi_aperture: float = 1.0
    conic: float = 0.0
    aspheric: tuple[float, ...] = (0.0,) * N_ASPHERE
    material: DispersionModel = AIR
    stop: bool = False
    kind: str = STANDARD
    trainable: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        asph = tuple(float(a) for a in self.aspheric)
        asph = asph + (0.0,) * (N_ASPHERE - len(asph))
        if len(asph) != N_ASPHERE:
            raise ValueError(f"at most {N_ASPHERE} aspheric coefficients")
        object.__setattr__(self, "aspheric", asph)
        object.__setattr__(self, "trainable", frozenset(self.trainable))
        if self.kind not in (STANDARD, EVEN_ASPHERE):
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if self.kind == STANDARD and any(asph):
            raise ValueError("standard conic surface cannot carry aspheric terms")
        if self.semi_aperture <= 0:
            raise ValueError("semi-aperture must be positive")
        bad = set(self.trainable) - set(PARAM_KINDS)
        if bad:
            raise ValueError(f"unknown trainable parameters {sorted(bad)}")

    def param(self, kind: str) -> float:
        if kind == "c":
            return self.curvature
        if kind == "d":
            return self.thickness
        if kind == "k":
            return self.conic
        return self.aspheric[int(kind[1:]) - 1]

    def with_param(self, kind: str, val: float) -> "Surface":
        if kind == "c":
            return replace(self, curvature=val)
        if kind == "d":
            return replace(self, thickness=val)
        if kind == "k":
            return replace(self, conic=val)
        asph = list(self.aspheric)
        asph[int(kind[1:]) - 1] = val
        return replace(self, aspheric=tuple(asph))

    def sag(self, r2):
        return sag(self, r2)


def _asphere_terms(aspheric):
    """Trailing-zero-trimmed coefficient list (Vars are never trimmed)."""
    coeffs = list(aspheric)
    while coeffs and not ad.is_var(coeffs[-1]) and coeffs[-1] == 0.0:
        coeffs.pop()
    return coeffs


def sag_profile(c, k, aspheric, r2):
    """Sag at squared radius ``r2`` for explicit (possibly taped) parameters."""
    arg = 1.0 - (1.0 + k) * c * c * r2
    z = c * r2 / (1.0 + ad.sqrt(arg))
    coeffs = _asphere_terms(aspheric)
    if coeffs:
        poly = coeffs[-1]
        for a in reversed(coeffs[:-1]):
            poly = poly * r2 + a
        z = z + poly * r2
    return z


def sag_slope(c, k, aspheric, r2):
    """dz/d(r²), used for the surface gradient and Newton's derivative."""
    arg = 1.0 - (1.0 + k) * c * c * r2
    g = c / (2.0 * ad.sqrt(arg))
    coeffs = _asphere_terms(aspheric)
    if coeffs:
        n = len(coeffs)
        poly = n * coeffs[-1]
        for i in range(n - 1, 0, -1):
            poly = poly * r2 + i * coeffs[i - 1]
        g = g + poly
    return g


def sag_domain_ok(c, k, r2):
    """True where the conic square root argument is positive."""
    return 1.0 - (1.0 + ad.value(k)) * ad.value(c) ** 2 * np.asarray(r2) > 0.0


def sag(surface: Surface, r2):
    """Sag of ``surface`` at squared radius ``r2`` (mm²)."""
    r2 = np.asarray(r2, dtype=float)
    if not np.all(sag_domain_ok(surface.curvature, surface.conic, r2)):
        raise SagDomainError(
            f"(1+k)c²r² >= 1 for c={surface.curvature}, k={surface.conic}, max r²={r2.max()}"
        )
    z = sag_profile(surface.curvature, surface.conic, surface.aspheric, r2)
    return float(z) if np.ndim(z) == 0 else z


def surface_gradient(surface: Surface, point) -> np.ndarray:
    """Gradient of F(x, y, z) = z - sag(x² + y²) at a surface-local point."""
    p = np.asarray(point, dtype=float)
    x, y = p[..., 0], p[..., 1]
    r2 = x * x + y * y
    if not np.all(sag_domain_ok(surface.curvature, surface.conic, r2)):
        raise SagDomainError("point outside the real-sag domain")
    g = sag_slope(surface.curvature, surface.conic, surface.aspheric, r2)
    return np.stack(np.broadcast_arrays(-2.0 * x * g, -2.0 * y * g, np.ones_like(r2)), axis=-1)


def max_real_radius(surface: Surface) -> float:
    """Largest radius with a real conic sag (inf if unbounded)."""
    q = (1.0 + surface.conic) * surface.curvature**2
    return np.inf if q <= 0 else 1.0 / np.sqrt(q)


@dataclass(frozen=True)
class ReferencePointSet:
    surface_id: int
    points: np.ndarray  # (n, 3), surface-local mm
    layout: tuple[int, int]  # (radii, azimuths)


def build_reference_points(
    surface: Surface, radii: int = 16, azimuths: int = 16, surface_id: int = 0
) -> ReferencePointSet:
    """Polar grid of on-surface points inside the aperture, plus the apex."""
    r = surface.semi_aperture * np.arange(1, radii + 1) / radii
    phi = 2.0 * np.pi * np.arange(azimuths) / azimuths
    rr, pp = np.meshgrid(r, phi, indexing="ij")
    x = np.concatenate([[0.0], (rr * np.cos(pp)).ravel()])
    y = np.concatenate([[0.0], (rr * np.sin(pp)).ravel()])
    z = np.asarray(sag(surface, x * x + y * y))
    return ReferencePointSet(surface_id, np.stack([x, y, z], axis=1), (radii, azimuths))
