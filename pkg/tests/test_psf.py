import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cohlens import adjoint as ad
from cohlens.psf import (
    PSF_PITCH,
    PSF_SIZE,
    ExtinctChannel,
    GridSpec,
    coherent_amplitude,
    coherent_psf_node,
    coherent_sum,
    naive_coherent_psf,
    plane_wave_delta,
    psf_three_channel,
    taped_psf,
)
from cohlens.system import lens_state
from cohlens.trace import FieldSpec, Vignetting, sample_pupil, trace_system

LAM = 587.6


def converging_rays(n, seed=0, f=5.0, R=1.0):
    """Rays converging to the origin with a little spherical aberration."""
    rng = np.random.default_rng(seed)
    u = np.linspace(-1, 1, n)
    ux, uy = (a.ravel() for a in np.meshgrid(u, u))
    px = 1e-3 * rng.normal(size=n * n)
    py = 1e-3 * rng.normal(size=n * n)
    s = R / math.hypot(f, R)
    dx, dy = -ux * s, -uy * s
    dz = np.sqrt(1 - dx**2 - dy**2)
    opl = 10.0 + 2e-4 * (ux**2 + uy**2) ** 2
    return opl, px, py, dx, dy, dz, np.ones(n * n)


def grid(m, pitch=PSF_PITCH):
    g = (np.arange(m) - (m - 1) / 2) * pitch
    return [a.ravel() for a in np.meshgrid(g, g)]


def test_plane_wave_delta_examples():
    assert plane_wave_delta([0, 0, 1], [0.1, 0.2, 0.0], [0.1, 0.2, 0.0]) == 0.0
    assert plane_wave_delta([0, 0, 1], [0, 0, 0], [0.3, -0.2, 0.0]) == 0.0
    th = 0.2
    assert plane_wave_delta([math.sin(th), 0, math.cos(th)], [0, 0, 0], [0.01, 0, 0]) == pytest.approx(0.01 * math.sin(th))


def test_single_ray_gives_uniform_unit_psf():
    gx, gy = grid(9)
    a = coherent_amplitude(LAM, [3.0], [0.0], [0.0], [0.0], [0.0], [1.0], [1.0], gx, gy)
    np.testing.assert_allclose(np.abs(a) ** 2, 1.0, atol=1e-15)


def test_half_wave_pair_cancels():
    gx, gy = grid(PSF_SIZE)
    lam_mm = LAM * 1e-6
    opl = np.array([7.0, 7.0 + lam_mm / 2])
    z = np.zeros(2)
    psf = coherent_psf_node(LAM, opl, z, z, z, z, np.ones(2), np.ones(2), gx, gy)
    assert psf.max() <= 1e-20


def test_single_ray_node_has_no_opl_gradient():
    gx, gy = grid(5)
    tape = ad.Tape()
    opl = tape.variable([4.2])
    out = coherent_psf_node(LAM, opl, [0.0], [0.0], [0.1], [0.0], [math.sqrt(0.99)], [1.0], gx, gy)
    # exact zero up to round-off; the phase scale k is ~1e4 per mm
    assert abs(tape.backward(ad.sum(out))[opl][0]) < 1e-9


def _both_gradients(n, m, seed=0):
    inputs = converging_rays(n, seed)
    gx, gy = grid(m)
    w = np.random.default_rng(seed + 1).normal(size=m * m)
    out = []
    for fn in (coherent_psf_node, naive_coherent_psf):
        tape = ad.Tape()
        vs = [tape.variable(a.copy()) for a in (*inputs, gx, gy)]
        p = fn(LAM, *vs)
        p = p / ad.sum(p)
        g = tape.backward(ad.sum(p * w))
        out.append([g[v] for v in vs])
    return out


def test_custom_node_matches_naive_tape_small():
    custom, naive = _both_gradients(8, 5)
    for a, b in zip(custom, naive):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_cotangents_match_finite_difference_on_opl():
    opl, px, py, dx, dy, dz, amp = converging_rays(4, seed=3)
    gx, gy = grid(7)
    w = np.random.default_rng(9).normal(size=49)

    def f(o):
        return float(np.sum(w * coherent_psf_node(LAM, o, px, py, dx, dy, dz, amp, gx, gy)))

    tape = ad.Tape()
    ov = tape.variable(opl)
    g = tape.backward(ad.sum(coherent_psf_node(LAM, ov, px, py, dx, dy, dz, amp, gx, gy) * w))[ov]
    fd = ad.finite_difference(f, opl, 1e-9)
    scale = np.abs(fd).max()
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * scale)


@settings(max_examples=20)
@given(shift=st.integers(-50 * 2**10, 50 * 2**10).map(lambda i: i / 2**10))
def test_global_phase_invariance(shift):
    opl, px, py, dx, dy, dz, amp = converging_rays(6)
    # dyadic OPL and shift make opl + shift exact, so only the operator is under test;
    # otherwise rounding the shifted input alone moves phases by ~1e-10 rad
    opl = np.round(opl * 2**32) / 2**32
    gx, gy = grid(9)
    a = coherent_psf_node(LAM, opl, px, py, dx, dy, dz, amp, gx, gy)
    b = coherent_psf_node(LAM, opl + shift, px, py, dx, dy, dz, amp, gx, gy)
    np.testing.assert_allclose(a / a.sum(), b / b.sum(), rtol=0, atol=1e-12)


@settings(max_examples=20)
@given(seed=st.integers(0, 1000))
def test_energy_bound(seed):
    rng = np.random.default_rng(seed)
    opl, px, py, dx, dy, dz, _ = converging_rays(5, seed)
    amp = rng.uniform(0.1, 1.0, size=opl.size)
    gx, gy = grid(7)
    psf = coherent_psf_node(LAM, opl, px, py, dx, dy, dz, amp, gx, gy)
    assert psf.sum() <= (np.abs(amp).sum()) ** 2 * gx.size
    assert psf.min() >= 0


@pytest.mark.parametrize("tile", [1, 3, 8, 1000])
def test_tiling_does_not_change_amplitude(tile):
    inputs = converging_rays(6)
    gx, gy = grid(11)
    ref = coherent_amplitude(LAM, *inputs, gx, gy, tile=8)
    np.testing.assert_allclose(coherent_amplitude(LAM, *inputs, gx, gy, tile=tile), ref, rtol=0, atol=1e-12)


def test_thread_count_does_not_change_bits(monkeypatch):
    inputs = converging_rays(6)
    gx, gy = grid(21)
    monkeypatch.setenv("COHLENS_THREADS", "1")
    a = coherent_amplitude(LAM, *inputs, gx, gy)
    monkeypatch.setenv("COHLENS_THREADS", "4")
    b = coherent_amplitude(LAM, *inputs, gx, gy)
    assert a.tobytes() == b.tobytes()


def test_three_channel_grid_and_normalization(singlet):
    psf = psf_three_channel(singlet.system, FieldSpec(3.0), n_pupil=33)
    assert psf.intensity.shape == (3, 63, 63)
    assert psf.pitch == 0.6e-3 and psf.size == 63
    assert psf.wavelengths == (486.1, 587.6, 656.3)
    np.testing.assert_allclose(psf.intensity.sum(axis=(1, 2)), 1.0, atol=1e-9)


def _centroid(img, pitch):
    c = (np.arange(img.shape[0]) - (img.shape[0] - 1) / 2) * pitch
    return np.array([np.sum(img.sum(axis=0) * c), np.sum(img.sum(axis=1) * c)])


def test_lateral_color_moves_blue_relative_to_red(singlet):
    psf = psf_three_channel(singlet.system, FieldSpec(5.0), n_pupil=33)
    blue = _centroid(psf.intensity[0], psf.pitch)
    red = _centroid(psf.intensity[2], psf.pitch)
    assert abs(blue[0] - red[0]) < 1e-9  # meridional field: no x shift
    assert abs(blue[1] - red[1]) > 0.05 * psf.pitch


def test_constant_index_channels_share_ray_geometry(ideal):
    s = ideal.system
    b = trace_system(s, sample_pupil(s, FieldSpec(0.0), 33))
    chans = [b.channel(lam) for lam in s.wavelengths]
    for c in chans[1:]:
        np.testing.assert_allclose(b.origin[c], b.origin[chans[0]], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.opl[c], b.opl[chans[0]], rtol=0, atol=1e-12)


def test_diffraction_scales_with_wavelength(ideal):
    """With identical rays, the channel at wavelength L on a grid of pitch p
    equals the reference channel on pitch p * L_ref / L."""
    s = ideal.system
    b = trace_system(s, sample_pupil(s, FieldSpec(0.0), 33))
    a = coherent_sum(b, GridSpec((0.0, 0.0), 0.6e-3, 21), wavelength=486.1)
    r = coherent_sum(b, GridSpec((0.0, 0.0), 0.6e-3 * 587.6 / 486.1, 21), wavelength=587.6)
    ia = a.intensity[0] / a.intensity.sum()
    ir = r.intensity[0] / r.intensity.sum()
    np.testing.assert_allclose(ia, ir, rtol=0, atol=1e-12)


def test_extinct_channel(singlet):
    s = singlet.system
    b = trace_system(s, sample_pupil(s, FieldSpec(0.0), 5))
    b.valid[b.wavelength == 486.1] = False
    with pytest.raises(ExtinctChannel):
        coherent_sum(b, GridSpec((0.0, 0.0), size=5))


def test_taped_psf_channels_sum_to_one(singlet):
    s = singlet.system
    tape = ad.Tape()
    state = lens_state(s, tape)
    chans, _ = taped_psf(s, state, FieldSpec(2.0), n_pupil=9, size=15,
                         vignetting=Vignetting())
    assert len(chans) == 3
    for c in chans:
        assert float(ad.sum(c)) == pytest.approx(1.0, abs=1e-12)
    g = tape.backward(ad.sum(chans[1] * np.linspace(0, 1, 225)), wrt=state.leaves)
    assert all(np.isfinite(float(g[v])) for v in state.leaves)
