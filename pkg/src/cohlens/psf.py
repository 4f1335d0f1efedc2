"""Coherent point spread function from traced rays.

Each valid ray at the image plane is treated as a plane wave.  The complex
amplitude at a grid point is

    A(x, y) = sum_i a_i * Dz_i * exp(i k (OPL_i + D_i . (P_grid - P_i)))

and the PSF is |A|².  The differentiable version is a single custom tape
node: it saves the per-ray and per-grid inputs plus A, and its backward pass
recomputes the ray x grid phases tile by tile instead of storing them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from . import adjoint as ad
from .system import LensSystem
from .trace import (
    FieldSpec,
    RayBundle,
    Vignetting,
    aim_chief,
    chief_rays,
    estimate_vignetting,
    rays_from_arrays,
    sample_pupil,
    trace_rays,
    trace_system,
)

PSF_PITCH = 0.6e-3  # mm
PSF_SIZE = 63
PUPIL_SAMPLES = 129
TILE = 8  # grid points per recomputation tile


class ExtinctChannel(RuntimeError):
    pass


def _workers() -> int:
    return max(1, int(os.environ.get("COHLENS_THREADS", "1")))


@dataclass(frozen=True)
class GridSpec:
    center: tuple[float, float]
    pitch: float = PSF_PITCH
    size: int = PSF_SIZE

    def axes(self):
        off = (np.arange(self.size) - (self.size - 1) / 2.0) * self.pitch
        return self.center[0] + off, self.center[1] + off

    def points(self):
        """Flattened (x, y) grid coordinates, row-major with rows along y."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys)
        return gx.ravel(), gy.ravel()


@dataclass
class PSFGrid:
    center: tuple[float, float]
    pitch: float
    size: int
    wavelengths: tuple[float, ...]
    amplitude: np.ndarray  # (channels, size, size) complex, unnormalized
    intensity: np.ndarray  # (channels, size, size)
    field: FieldSpec | None = None
    normalization: str = "unit_sum"

    def channel(self, i: int) -> np.ndarray:
        return self.intensity[i]


def plane_wave_delta(direction, position, grid_point) -> float:
    """Path-length advance of a ray's plane wave from its image point to a grid point."""
    return float(np.dot(np.asarray(direction, float), np.asarray(grid_point, float) - np.asarray(position, float)))


# ---------------------------------------------------------------------------
# streaming forward / backward kernels
# ---------------------------------------------------------------------------


def _tiles(m: int, tile: int):
    return [slice(s, min(s + tile, m)) for s in range(0, m, tile)]


def _phase_block(k, base, dx, dy, gx, gy):
    return base[None, :] + k * (gx[:, None] * dx[None, :] + gy[:, None] * dy[None, :])


def _map(fn, items):
    workers = _workers()
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def coherent_amplitude(wavelength_nm, opl, px, py, dx, dy, dz, amp, gx, gy, tile=TILE,
                       opl_ref=None):
    """Complex amplitude on grid points ``(gx, gy)`` (numpy, streamed over tiles)."""
    k = 2.0 * np.pi / (wavelength_nm * 1e-6)
    opl, px, py, dx, dy, dz, amp, gx, gy = (
        np.asarray(a, dtype=float) for a in (opl, px, py, dx, dy, dz, amp, gx, gy)
    )
    ref = float(np.min(opl)) if opl_ref is None else opl_ref
    base = k * (opl - ref - dx * px - dy * py)
    b = amp * dz
    m = len(gx)

    def run(sl):
        ph = _phase_block(k, base, dx, dy, gx[sl], gy[sl])
        return np.cos(ph) @ b, np.sin(ph) @ b

    parts = _map(run, _tiles(m, tile))
    re = np.concatenate([p[0] for p in parts])
    im = np.concatenate([p[1] for p in parts])
    return re + 1j * im


def coherent_sum_backward(g, wavelength_nm, opl_ref, opl, px, py, dx, dy, dz, amp, gx, gy,
                          a_re, a_im, tile=TILE):
    """Cotangents of PSF = |A|² with respect to every ray and grid input.

    For each ray the phase derivative is dPSF/dphi_i = -2 Im(conj(A) w_i)
    with w_i the ray's complex contribution; it is accumulated over grid
    tiles without keeping the ray x grid phase matrix.  Partial sums are
    combined in fixed tile order.
    """
    k = 2.0 * np.pi / (wavelength_nm * 1e-6)
    base = k * (opl - opl_ref - dx * px - dy * py)
    b = amp * dz
    m = len(gx)
    gar = g * a_re
    gai = g * a_im
    kbdx = k * b * dx
    kbdy = k * b * dy

    def run(sl):
        ph = _phase_block(k, base, dx, dy, gx[sl], gy[sl])
        c = np.cos(ph)
        s = np.sin(ph)
        u, v = gar[sl], gai[sl]
        ux, vx = u * gx[sl], v * gx[sl]
        uy, vy = u * gy[sl], v * gy[sl]
        phi = u @ s - v @ c
        xs = ux @ s - vx @ c
        ys = uy @ s - vy @ c
        bb = u @ c + v @ s
        # per-grid: sum_i gphi(g, i) * k * D_i
        sg_x = s @ kbdx
        cg_x = c @ kbdx
        sg_y = s @ kbdy
        cg_y = c @ kbdy
        gxb = -2.0 * (u * sg_x - v * cg_x)
        gyb = -2.0 * (u * sg_y - v * cg_y)
        return phi, xs, ys, bb, gxb, gyb

    parts = _map(run, _tiles(m, tile))
    phi = np.zeros(len(opl))
    xs = np.zeros(len(opl))
    ys = np.zeros(len(opl))
    bb = np.zeros(len(opl))
    for p in parts:
        phi += p[0]
        xs += p[1]
        ys += p[2]
        bb += p[3]
    gx_bar = np.concatenate([p[4] for p in parts])
    gy_bar = np.concatenate([p[5] for p in parts])
    phi_bar = -2.0 * b * phi  # sum over grid of dL/dphi_i(g)
    x_mom = -2.0 * b * xs
    y_mom = -2.0 * b * ys
    b_bar = 2.0 * bb
    opl_bar = k * phi_bar
    dx_bar = k * (x_mom - px * phi_bar)
    dy_bar = k * (y_mom - py * phi_bar)
    px_bar = -k * dx * phi_bar
    py_bar = -k * dy * phi_bar
    return opl_bar, px_bar, py_bar, dx_bar, dy_bar, b_bar * amp, b_bar * dz, gx_bar, gy_bar


def coherent_psf_node(wavelength_nm, opl, px, py, dx, dy, dz, amp, gx, gy, tile=TILE):
    """PSF intensity on flattened grid points as ONE custom tape node.

    Inputs may be Vars (on a shared tape) or arrays.  Saved for the backward
    pass: the per-ray inputs, the grid coordinates and A.
    """
    inputs = [opl, px, py, dx, dy, dz, amp, gx, gy]
    tape = next((x.tape for x in inputs if ad.is_var(x)), None)
    vals = [np.asarray(ad.value(x), dtype=float) for x in inputs]
    n = len(vals[0])
    vals[6] = np.broadcast_to(vals[6], (n,)).copy()
    ref = float(np.min(vals[0]))

    def forward(opl, px, py, dx, dy, dz, amp, gx, gy):
        amp = np.broadcast_to(amp, np.shape(opl))
        a = coherent_amplitude(wavelength_nm, opl, px, py, dx, dy, dz, amp, gx, gy, tile, ref)
        a_re = np.ascontiguousarray(a.real)
        a_im = np.ascontiguousarray(a.imag)
        saved = (opl, px, py, dx, dy, dz, amp, gx, gy, a_re, a_im)
        return a_re * a_re + a_im * a_im, saved

    def backward(g, opl, px, py, dx, dy, dz, amp, gx, gy, a_re, a_im):
        return coherent_sum_backward(
            g, wavelength_nm, ref, opl, px, py, dx, dy, dz, amp, gx, gy, a_re, a_im, tile
        )

    if tape is None:
        return forward(*vals)[0]
    wrapped = [x if ad.is_var(x) else v for x, v in zip(inputs, vals)]
    return tape.register_custom(forward, backward, wrapped, name="coherent_psf")


def naive_coherent_psf(wavelength_nm, opl, px, py, dx, dy, dz, amp, gx, gy):
    """The same PSF built from elementary taped operations on ray x grid arrays.

    Reference for the custom node; its tape stores the broadcast intermediates.
    """
    k = 2.0 * np.pi / (wavelength_nm * 1e-6)
    n = len(ad.value(opl))
    m = len(ad.value(gx))

    def col(x):
        return x.reshape((n, 1)) if ad.is_var(x) else np.reshape(x, (n, 1))

    def row(x):
        return x.reshape((1, m)) if ad.is_var(x) else np.reshape(x, (1, m))

    ref = float(np.min(ad.value(opl)))
    phase = k * ((col(opl) - ref) + col(dx) * (row(gx) - col(px)) + col(dy) * (row(gy) - col(py)))
    c, s = ad.expi(phase)
    b = col(amp * dz)
    re = ad.sum(b * c, axis=0)
    im = ad.sum(b * s, axis=0)
    return re * re + im * im


# ---------------------------------------------------------------------------
# bundle-level API
# ---------------------------------------------------------------------------


def coherent_sum(bundle: RayBundle, grid: GridSpec, wavelength: float | None = None,
                 tile: int = TILE) -> PSFGrid:
    """Coherent PSF of a traced bundle on ``grid`` (one channel per wavelength)."""
    lams = np.unique(bundle.wavelength) if wavelength is None else np.array([wavelength])
    gx, gy = grid.points()
    amps = []
    for lam in lams:
        sel = (bundle.wavelength == lam) & bundle.valid & (bundle.amplitude != 0)
        if not sel.any():
            raise ExtinctChannel(f"no valid ray at {lam} nm")
        p = bundle.origin[sel]
        d = bundle.direction[sel]
        a = coherent_amplitude(
            lam, bundle.opl[sel], p[:, 0], p[:, 1], d[:, 0], d[:, 1], d[:, 2],
            bundle.amplitude[sel], gx, gy, tile,
        )
        amps.append(a.reshape(grid.size, grid.size))
    amp = np.stack(amps)
    inten = (amp * amp.conj()).real
    return PSFGrid(grid.center, grid.pitch, grid.size, tuple(float(x) for x in lams), amp,
                   inten, bundle.field, "none")


def normalize(psf: PSFGrid) -> PSFGrid:
    sums = psf.intensity.sum(axis=(1, 2), keepdims=True)
    if np.any(sums <= 0):
        raise ExtinctChannel("PSF channel with zero energy")
    return PSFGrid(psf.center, psf.pitch, psf.size, psf.wavelengths, psf.amplitude,
                   psf.intensity / sums, psf.field, "unit_sum")


def psf_three_channel(
    system: LensSystem,
    fld: FieldSpec,
    n_pupil: int = PUPIL_SAMPLES,
    size: int = PSF_SIZE,
    pitch: float = PSF_PITCH,
    vignetting: Vignetting | None = None,
    tile: int = TILE,
) -> PSFGrid:
    """Unit-sum PSF per design wavelength, centered on the reference chief ray."""
    if vignetting is None:
        vignetting = estimate_vignetting(system, fld)
    aim = aim_chief(system, fld)
    cr = chief_rays(system, [aim])
    center = (float(ad.value(cr.ox)[0]), float(ad.value(cr.oy)[0]))
    bundle = sample_pupil(system, fld, n_pupil, vignetting)
    traced = trace_system(system, bundle)
    psf = coherent_sum(traced, GridSpec(center, pitch, size), tile=tile)
    out = normalize(psf)
    out.field = fld
    return out


def taped_psf(system: LensSystem, state, fld: FieldSpec, n_pupil: int = 33,
              size: int = PSF_SIZE, pitch: float = PSF_PITCH,
              vignetting: Vignetting | None = None, tile: int = TILE):
    """Differentiable unit-sum PSF channels (list of Vars, each ``size*size``).

    Pupil sampling and the vignetting fit are treated as fixed for the step;
    the grid center follows the taped reference chief ray.
    """
    if vignetting is None:
        vignetting = estimate_vignetting(system, fld)
    aim = aim_chief(system, fld)
    cr = chief_rays(system, [aim], state)
    bundle = sample_pupil(system, fld, n_pupil, vignetting)
    rays = rays_from_arrays(bundle.origin, bundle.direction, bundle.wavelength)
    res = trace_rays(system, rays, state)
    r = res.rays
    off = (np.arange(size) - (size - 1) / 2.0) * pitch
    ox, oy = np.meshgrid(off, off)
    cx = cr.ox[0] if ad.is_var(cr.ox) else float(cr.ox[0])
    cy = cr.oy[0] if ad.is_var(cr.oy) else float(cr.oy[0])
    gx = cx + ox.ravel()
    gy = cy + oy.ravel()
    out = []
    for lam in system.wavelengths:
        sel = np.flatnonzero(r.wavelength == lam)
        if not sel.size:
            raise ExtinctChannel(f"no valid ray at {lam} nm")

        def pick(a):
            return a[sel] if ad.is_var(a) else np.asarray(a)[sel]

        psf = coherent_psf_node(
            lam, pick(r.opl), pick(r.ox), pick(r.oy), pick(r.dx), pick(r.dy), pick(r.dz),
            np.ones(sel.size), gx, gy, tile,
        )
        out.append(psf / ad.sum(psf))
    return out, res
