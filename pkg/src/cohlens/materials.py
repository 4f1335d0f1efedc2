"""Refractive-index models.

Wavelengths are in nm at the API surface and converted to µm for the
dispersion formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONSTANT = "constant"
SELLMEIER = "sellmeier"
SCHOTT = "schott"

KINDS = (CONSTANT, SELLMEIER, SCHOTT)


class WavelengthRangeError(ValueError):
    pass


@dataclass(frozen=True)
class DispersionModel:
    """Refractive index as a function of wavelength.

    ``coefficients`` per kind:

    * constant: ``(n,)``
    * sellmeier: ``(B1, B2, B3, C1, C2, C3)`` with C in µm²,
      n² = 1 + Σ B λ²/(λ² − C)
    * schott: ``(A0, ..., A5)``,
      n² = A0 + A1 λ² + A2 λ⁻² + A3 λ⁻⁴ + A4 λ⁻⁶ + A5 λ⁻⁸
    """

    kind: str
    coefficients: tuple[float, ...]
    wavelength_range: tuple[float, float] = (0.0, np.inf)
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dispersion model {self.kind!r}")
        expected = {CONSTANT: 1, SELLMEIER: 6, SCHOTT: 6}[self.kind]
        if len(self.coefficients) != expected:
            raise ValueError(
                f"{self.kind} model needs {expected} coefficients, got {len(self.coefficients)}"
            )
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        lo, hi = self.wavelength_range
        object.__setattr__(self, "wavelength_range", (float(lo), float(hi)))

    @property
    def is_air(self) -> bool:
        return self.kind == CONSTANT and self.coefficients[0] == 1.0

    def __call__(self, wavelength):
        return refractive_index(self, wavelength)


AIR = DispersionModel(CONSTANT, (1.0,), name="air")


def constant(n: float, name: str = "") -> DispersionModel:
    return DispersionModel(CONSTANT, (n,), name=name)


def refractive_index(model: DispersionModel, wavelength):
    """Index of ``model`` at ``wavelength`` (nm); scalar or array."""
    lam_nm = np.asarray(wavelength, dtype=float)
    lo, hi = model.wavelength_range
    if np.any(lam_nm < lo) or np.any(lam_nm > hi):
        raise WavelengthRangeError(
            f"wavelength {wavelength} nm outside [{lo}, {hi}] nm for {model.name or model.kind}"
        )
    cf = model.coefficients
    if model.kind == CONSTANT:
        n = np.full_like(lam_nm, cf[0])
    else:
        l2 = (lam_nm * 1e-3) ** 2
        if model.kind == SELLMEIER:
            b1, b2, b3, c1, c2, c3 = cf
            n2 = 1.0 + b1 * l2 / (l2 - c1) + b2 * l2 / (l2 - c2) + b3 * l2 / (l2 - c3)
        else:
            a0, a1, a2, a3, a4, a5 = cf
            inv = 1.0 / l2
            n2 = a0 + a1 * l2 + inv * (a2 + inv * (a3 + inv * (a4 + inv * a5)))
        n = np.sqrt(n2)
    return float(n) if n.ndim == 0 else n


# A few catalog glasses, handy for fixtures and demos.  The fixture lens files
# carry their own coefficients; these are only defaults for the parser.
CATALOG = {
    "N-BK7": DispersionModel(
        SELLMEIER,
        (1.03961212, 0.231792344, 1.01046945, 0.00600069867, 0.0200179144, 103.560653),
        (300.0, 2500.0),
        "N-BK7",
    ),
    "N-SF5": DispersionModel(
        SELLMEIER,
        (1.52481889, 0.187085527, 1.42729015, 0.011254756, 0.0588995392, 129.141675),
        (370.0, 2500.0),
        "N-SF5",
    ),
    "N-SK16": DispersionModel(
        SELLMEIER,
        (1.34317774, 0.241144399, 0.994317969, 0.00704687339, 0.0229005, 92.7508526),
        (310.0, 2500.0),
        "N-SK16",
    ),
}
