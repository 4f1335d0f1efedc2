import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cohlens.materials import (
    AIR,
    CATALOG,
    SCHOTT,
    SELLMEIER,
    DispersionModel,
    WavelengthRangeError,
    constant,
    refractive_index,
)

from conftest import load


def mp_sellmeier(coeffs, lam_nm):
    mpmath.mp.dps = 40
    b1, b2, b3, c1, c2, c3 = (mpmath.mpf(repr(c)) for c in coeffs)
    l2 = (mpmath.mpf(repr(lam_nm)) / 1000) ** 2
    return mpmath.sqrt(1 + b1 * l2 / (l2 - c1) + b2 * l2 / (l2 - c2) + b3 * l2 / (l2 - c3))


def test_air_is_identity():
    assert refractive_index(AIR, 587.6) == 1.0
    assert AIR.is_air


def test_bk7_against_high_precision_oracle():
    glass = load("singlet").system.surfaces[1].material
    assert glass.kind == SELLMEIER
    for lam in (486.1, 587.6, 656.3, 400.0, 1000.0):
        expected = float(mp_sellmeier(glass.coefficients, lam))
        assert refractive_index(glass, lam) == pytest.approx(expected, abs=1e-13)
    assert refractive_index(glass, 587.6) == pytest.approx(1.5168, abs=1e-4)


@given(n0=st.floats(1.0, 2.5), lam=st.floats(350.0, 1500.0))
def test_schott_constant_polynomial(n0, lam):
    model = DispersionModel(SCHOTT, (n0 * n0, 0, 0, 0, 0, 0))
    assert refractive_index(model, lam) == pytest.approx(n0, rel=1e-14)


def test_out_of_range_raises():
    with pytest.raises(WavelengthRangeError):
        refractive_index(CATALOG["N-BK7"], 200.0)
    with pytest.raises(WavelengthRangeError):
        refractive_index(CATALOG["N-BK7"], np.array([500.0, 3000.0]))


def test_normal_dispersion_is_monotone():
    lam = np.linspace(400.0, 800.0, 41)
    for glass in CATALOG.values():
        n = refractive_index(glass, lam)
        assert np.all(np.diff(n) < 0)


def test_array_input_and_constant():
    n = refractive_index(constant(1.5), np.array([486.1, 656.3]))
    np.testing.assert_array_equal(n, [1.5, 1.5])
    assert isinstance(refractive_index(CATALOG["N-SF5"], 587.6), float)


def test_bad_model_rejected():
    with pytest.raises(ValueError):
        DispersionModel("cauchy", (1.5,))
    with pytest.raises(ValueError):
        DispersionModel(SELLMEIER, (1.0, 2.0))


def test_catalog_dispersion_ordering():
    # flint (N-SF5) disperses more than crown (N-BK7)
    def spread(g):
        return refractive_index(g, 486.1) - refractive_index(g, 656.3)

    assert spread(CATALOG["N-SF5"]) > spread(CATALOG["N-BK7"]) > 0
    assert math.isfinite(refractive_index(CATALOG["N-SK16"], 587.6))
