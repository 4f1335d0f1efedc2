"""Lens system container and its flattened differentiable parameters."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import adjoint as ad
from .geometry import PARAM_KINDS, Surface, max_real_radius
from .materials import AIR, DispersionModel

DESIGN_WAVELENGTHS = (486.1, 587.6, 656.3)


class ParamEntry(NamedTuple):
    surface: int
    kind: str
    value: float
    trainable: bool


class ParamVector(list):
    """Ordered list of :class:`ParamEntry`, surface-major then PARAM_KINDS order."""

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self])

    def trainable(self) -> "ParamVector":
        return ParamVector(e for e in self if e.trainable)

    def labels(self) -> list[str]:
        return [f"s{e.surface}.{e.kind}" for e in self]


@dataclass(frozen=True)
class LensSystem:
    surfaces: tuple[Surface, ...]
    wavelengths: tuple[float, ...] = DESIGN_WAVELENGTHS
    reference: int = 1
    fields: tuple[float, ...] = (0.0,)
    image_height: float = 1.0  # full image diagonal, mm
    sensor_pitch: float = 1.2  # µm
    object_distance: float = np.inf
    name: str = ""
    object_material: DispersionModel = AIR

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in self.wavelengths))
        object.__setattr__(self, "fields", tuple(float(f) for f in self.fields))
        if not self.surfaces:
            raise ValueError("a lens system needs at least one surface")
        stops = [i for i, s in enumerate(self.surfaces) if s.stop]
        if len(stops) != 1:
            raise ValueError(f"exactly one stop surface required, found {stops}")
        if not 0 <= self.reference < len(self.wavelengths):
            raise ValueError("reference wavelength index out of range")
        if np.isfinite(self.object_distance):
            raise NotImplementedError("only objects at infinity are supported")
        for i, s in enumerate(self.surfaces):
            if s.semi_aperture >= max_real_radius(s):
                raise ValueError(f"surface {i}: sag is not real over the full aperture")

    @property
    def stop_index(self) -> int:
        return next(i for i, s in enumerate(self.surfaces) if s.stop)

    @property
    def reference_wavelength(self) -> float:
        return self.wavelengths[self.reference]

    @property
    def vertices(self) -> np.ndarray:
        """Axial positions of the surface vertices, first surface at z = 0."""
        d = np.array([s.thickness for s in self.surfaces])
        return np.concatenate([[0.0], np.cumsum(d[:-1])])

    @property
    def total_track(self) -> float:
        return float(sum(s.thickness for s in self.surfaces))

    @property
    def max_field(self) -> float:
        return max(abs(f) for f in self.fields)

    def medium_before(self, j: int) -> DispersionModel:
        return self.object_material if j == 0 else self.surfaces[j - 1].material

    def param_vector(self) -> ParamVector:
        return ParamVector(
            ParamEntry(j, kind, float(s.param(kind)), kind in s.trainable)
            for j, s in enumerate(self.surfaces)
            for kind in PARAM_KINDS
        )

    def trainable_values(self) -> np.ndarray:
        return self.param_vector().trainable().values

    def with_trainable(self, values) -> "LensSystem":
        """Copy with the trainable parameters replaced, in ParamVector order."""
        values = np.asarray(values, dtype=float)
        entries = self.param_vector().trainable()
        if values.shape != (len(entries),):
            raise ValueError(f"expected {len(entries)} values, got {values.shape}")
        surfaces = list(self.surfaces)
        for e, v in zip(entries, values):
            surfaces[e.surface] = surfaces[e.surface].with_param(e.kind, float(v))
        return replace(self, surfaces=tuple(surfaces))

    def with_surface(self, j: int, **changes) -> "LensSystem":
        surfaces = list(self.surfaces)
        surfaces[j] = replace(surfaces[j], **changes)
        return replace(self, surfaces=tuple(surfaces))


@dataclass
class SurfaceState:
    """Shape parameters of one surface, floats or taped Vars."""

    c: object
    k: object
    aspheric: list
    d: object
    z: object  # vertex position
    semi_aperture: float
    surface: Surface


class LensState(NamedTuple):
    surfaces: list
    image_z: object
    leaves: list  # taped leaves in trainable ParamVector order (empty untaped)


def lens_state(system: LensSystem, tape: ad.Tape | None = None) -> LensState:
    """Per-surface parameters; trainable ones become tape leaves if a tape is given."""
    leaves = []
    states = []
    z = 0.0
    for j, s in enumerate(system.surfaces):
        vals = {}
        for kind in PARAM_KINDS:
            v = s.param(kind)
            if tape is not None and kind in s.trainable:
                v = tape.variable(v, name=f"s{j}.{kind}")
                leaves.append(v)
            vals[kind] = v
        states.append(
            SurfaceState(
                vals["c"],
                vals["k"],
                [vals[f"a{i}"] for i in range(1, 9)],
                vals["d"],
                z,
                s.semi_aperture,
                s,
            )
        )
        z = z + vals["d"]
    return LensState(states, z, leaves)
