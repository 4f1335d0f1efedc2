"""Sequential exact ray tracing.

Intersections are found with Newton's method on ``F = z - z_vertex - sag(r²)``
in plain numpy.  When the lens parameters are taped, one extra Newton step
is recorded from the converged root (held constant); at a root this step has
exactly the implicit-function derivative, so gradients never flow through the
iteration history.

Objects are at infinity.  Rays of one field start on a common tilted plane
wavefront in front of the lens, so their optical path lengths share one
reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import adjoint as ad
from .geometry import (
    Surface,
    build_reference_points,
    sag_domain_ok,
    sag_profile,
    sag_slope,
)
from .materials import refractive_index
from .system import LensState, LensSystem, lens_state

NEWTON_TOL = 1e-10  # mm
NEWTON_MAXITER = 50
GRAZING = 1e-14
REF_RADII = 16
REF_AZIMUTHS = 16

VALID = 0
NO_INTERSECTION = 1
APERTURE_CLIP = 2
TIR = 3
FAILURE_NAMES = ("none", "no_intersection", "aperture_clip", "total_internal_reflection")

REFERENCE_GUESS = "reference"
TANGENT_GUESS = "tangent"


class TraceError(RuntimeError):
    pass


class BundleExtinct(TraceError):
    pass


class VignettingError(TraceError):
    pass


class AimingError(TraceError):
    pass


class AfocalSystemError(TraceError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    """Object-space field: half angle and azimuth in degrees (azimuth 0 is the y-z plane)."""

    angle: float
    azimuth: float = 0.0

    def direction(self) -> np.ndarray:
        v = np.radians(self.angle)
        phi = np.radians(self.azimuth)
        return np.array([np.sin(v) * np.sin(phi), np.sin(v) * np.cos(phi), np.cos(v)])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    opl: float = 0.0
    amplitude: float = 1.0
    wavelength: float = 587.6
    valid: bool = True
    failure: int = VALID


@dataclass(frozen=True)
class Vignetting:
    """Surviving pupil region as an axis-aligned ellipse in normalized pupil units."""

    dx: float = 0.0
    dy: float = 0.0
    cx: float = 1.0
    cy: float = 1.0

    def map(self, px, py):
        return self.dx + self.cx * np.asarray(px), self.dy + self.cy * np.asarray(py)


@dataclass(frozen=True)
class EntrancePupil:
    z: float
    radius: float


@dataclass
class RayBundle:
    """Rays of one field over all requested wavelengths (wavelength-major order)."""

    field: FieldSpec
    wavelength: np.ndarray
    pupil: np.ndarray  # (N, 2) normalized pupil coordinates after vignetting map
    origin: np.ndarray  # (N, 3)
    direction: np.ndarray  # (N, 3)
    opl: np.ndarray
    amplitude: np.ndarray
    valid: np.ndarray
    failure: np.ndarray
    vignetting: Vignetting = field(default_factory=Vignetting)
    entrance_pupil: EntrancePupil | None = None

    def __len__(self):
        return len(self.opl)

    def channel(self, wavelength: float) -> np.ndarray:
        return np.flatnonzero(self.wavelength == wavelength)


# ---------------------------------------------------------------------------
# working ray set (numpy or taped components)
# ---------------------------------------------------------------------------


@dataclass
class Rays:
    """Active rays during a trace; coordinates may be taped Vars."""

    ox: object
    oy: object
    oz: object
    dx: object
    dy: object
    dz: object
    opl: object
    wavelength: np.ndarray
    index: np.ndarray  # position in the originating bundle

    def take(self, keep: np.ndarray) -> "Rays":
        def sub(a):
            if ad.is_var(a):
                return a[keep]
            return np.asarray(a)[keep]

        return Rays(
            sub(self.ox), sub(self.oy), sub(self.oz),
            sub(self.dx), sub(self.dy), sub(self.dz),
            sub(self.opl), self.wavelength[keep], self.index[keep],
        )

    def values(self):
        v = ad.value
        return (
            np.asarray(v(self.ox)), np.asarray(v(self.oy)), np.asarray(v(self.oz)),
            np.asarray(v(self.dx)), np.asarray(v(self.dy)), np.asarray(v(self.dz)),
        )

    def __len__(self):
        return len(self.index)


def rays_from_arrays(origin, direction, wavelength, opl=None) -> Rays:
    origin = np.atleast_2d(np.asarray(origin, dtype=float))
    direction = np.atleast_2d(np.asarray(direction, dtype=float))
    n = len(origin)
    opl = np.zeros(n) if opl is None else np.asarray(opl, dtype=float)
    return Rays(
        origin[:, 0], origin[:, 1], origin[:, 2],
        direction[:, 0], direction[:, 1], direction[:, 2],
        opl, np.broadcast_to(np.asarray(wavelength, dtype=float), (n,)).copy(), np.arange(n),
    )


# ---------------------------------------------------------------------------
# intersection
# ---------------------------------------------------------------------------


def _surface_eval(c, k, a, zv, px, py, pz):
    r2 = px * px + py * py
    dom = sag_domain_ok(c, k, r2)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2s = np.where(dom, r2, 0.0)
        f = pz - zv - sag_profile(c, k, a, r2s)
        g = sag_slope(c, k, a, r2s)
    return f, g, dom


def tangent_plane_guess(o, d, vertex_z: float = 0.0) -> np.ndarray:
    """Path length to the vertex tangent plane, the classic Newton start."""
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (vertex_z - o[:, 2]) / d[:, 2]


def reference_guess(o, d, points: np.ndarray, chunk: int = 2048):
    """Along-ray distance to the foot of the perpendicular from the best reference point.

    The reference point minimizes |(P_s - P_r) x D| / ((P_s - P_r) . D) over
    points ahead of the ray.  Returns ``(t0, found)``.
    """
    o = np.atleast_2d(np.asarray(o, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    n = len(o)
    t0 = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    for s in range(0, n, chunk):
        w = points[None, :, :] - o[s : s + chunk, None, :]
        along = np.einsum("nsk,nk->ns", w, d[s : s + chunk])
        perp = np.sqrt(np.maximum(np.einsum("nsk,nsk->ns", w, w) - along * along, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(along > 0.0, perp / along, np.inf)
        best = np.argmin(ratio, axis=1)
        rows = np.arange(len(best))
        found[s : s + chunk] = np.isfinite(ratio[rows, best])
        t0[s : s + chunk] = along[rows, best]
    return t0, found


def initial_guess(ray: Ray, refs) -> np.ndarray:
    """Initial intersection estimate P_initial for one ray (refs in the ray's frame)."""
    t0, found = reference_guess(ray.origin, ray.direction, refs.points)
    if not found[0]:
        raise TraceError("no reference point ahead of the ray")
    return np.asarray(ray.origin) + t0[0] * np.asarray(ray.direction)


def newton_solve(c, k, a, zv, o, d, t0, tol=NEWTON_TOL, maxiter=NEWTON_MAXITER):
    """Vectorized Newton iteration for the ray path length to a surface.

    Returns ``(t, ok, iterations)``.  One iteration is one Newton update; a ray
    converges when the residual at its updated point drops below ``tol``.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    t = np.array(t0, dtype=float, copy=True)
    n = len(t)
    ok = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    act = np.flatnonzero(np.isfinite(t))
    ox, oy, oz = o[act, 0], o[act, 1], o[act, 2]
    dx, dy, dz = d[act, 0], d[act, 1], d[act, 2]
    ta = t[act]
    f, g, dom = _surface_eval(c, k, a, zv, ox + ta * dx, oy + ta * dy, oz + ta * dz)
    for it in range(1, maxiter + 1):
        if not act.size:
            break
        px, py = ox + ta * dx, oy + ta * dy
        df = dz - 2.0 * g * (px * dx + py * dy)
        bad = ~dom | (np.abs(df) < GRAZING) | ~np.isfinite(f)
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = np.where(bad, ta, ta - f / df)
        f, g, dom = _surface_eval(c, k, a, zv, ox + ta * dx, oy + ta * dy, oz + ta * dz)
        conv = ~bad & dom & (np.abs(f) < tol)
        t[act] = ta
        iters[act] = it
        ok[act[conv]] = True
        keep = ~bad & ~conv
        act, ta, f, g, dom = act[keep], ta[keep], f[keep], g[keep], dom[keep]
        ox, oy, oz, dx, dy, dz = ox[keep], oy[keep], oz[keep], dx[keep], dy[keep], dz[keep]
    return t, ok, iters


@dataclass(frozen=True)
class Intersection:
    point: np.ndarray
    t: float
    iterations: int
    failure: int


def newton_intersect(ray: Ray, surface: Surface, p_initial, vertex_z: float = 0.0) -> Intersection:
    """Intersect one ray with ``surface`` starting Newton from ``p_initial``."""
    o = np.asarray(ray.origin, dtype=float)
    d = np.asarray(ray.direction, dtype=float)
    t0 = float(np.dot(np.asarray(p_initial, dtype=float) - o, d))
    t, ok, it = newton_solve(
        surface.curvature, surface.conic, surface.aspheric, vertex_z, o, d, [t0]
    )
    point = o + t[0] * d
    if not ok[0]:
        return Intersection(point, float(t[0]), int(it[0]), NO_INTERSECTION)
    failure = VALID
    if point[0] ** 2 + point[1] ** 2 > surface.semi_aperture**2:
        failure = APERTURE_CLIP
    return Intersection(point, float(t[0]), int(it[0]), failure)


def refract(direction, normal, n1, n2):
    """Vector Snell's law; returns ``(new_direction, valid)``.

    ``normal`` may point either way; it is oriented along the ray.
    """
    dvec = np.asarray(direction, dtype=float)
    nvec = np.asarray(normal, dtype=float)
    cos1 = np.sum(dvec * nvec, axis=-1)
    sgn = np.where(cos1 < 0, -1.0, 1.0)
    nvec = nvec * sgn[..., None]
    cos1 = cos1 * sgn
    mu = np.asarray(np.asarray(n1, dtype=float) / np.asarray(n2, dtype=float))
    k2 = 1.0 - mu * mu * (1.0 - cos1 * cos1)
    valid = k2 >= 0.0
    cos2 = np.sqrt(np.where(valid, k2, 0.0))
    out = mu[..., None] * dvec + np.asarray(cos2 - mu * cos1)[..., None] * nvec
    return out, valid


# ---------------------------------------------------------------------------
# sequential trace
# ---------------------------------------------------------------------------


@dataclass
class TraceResult:
    rays: Rays  # surviving rays at the last traced plane
    failure: np.ndarray  # per originating ray
    iterations: np.ndarray  # max Newton iterations per originating ray
    n_rays: int


def _indices(material, wavelength):
    if material.kind == "constant":
        return np.full(len(wavelength), material.coefficients[0])
    uniq, inv = np.unique(wavelength, return_inverse=True)
    return np.asarray(refractive_index(material, uniq)).reshape(-1)[inv]


def trace_rays(
    system: LensSystem,
    rays: Rays,
    state: LensState | None = None,
    guess: str = REFERENCE_GUESS,
    stop_at: int | None = None,
    n_total: int | None = None,
) -> TraceResult:
    """Trace ``rays`` through the system (to the image plane, or onto surface ``stop_at``).

    With ``stop_at`` the rays end at their intersection with that surface,
    before refraction.  Invalid rays are dropped from ``rays`` and their
    reason recorded in ``failure``.
    """
    if state is None:
        state = lens_state(system)
    n_total = len(rays) if n_total is None else n_total
    failure = np.zeros(n_total, dtype=int)
    iterations = np.zeros(n_total, dtype=int)
    last = len(system.surfaces) - 1 if stop_at is None else stop_at
    for j in range(last + 1):
        s = state.surfaces[j]
        surf = system.surfaces[j]
        c, k, a = ad.value(s.c), ad.value(s.k), [ad.value(x) for x in s.aspheric]
        zv = float(ad.value(s.z))
        ox, oy, oz, dx, dy, dz = rays.values()
        o = np.stack([ox, oy, oz], axis=1)
        d = np.stack([dx, dy, dz], axis=1)
        if guess == REFERENCE_GUESS:
            live = replace(surf, curvature=c, conic=k, aspheric=tuple(a))
            refs = build_reference_points(live, REF_RADII, REF_AZIMUTHS, j)
            pts = refs.points + np.array([0.0, 0.0, zv])
            t0, found = reference_guess(o, d, pts)
        else:
            t0 = tangent_plane_guess(o, d, zv)
            found = np.isfinite(t0)
        t0 = np.where(found, t0, np.nan)
        tstar, ok, it = newton_solve(c, k, a, zv, o, d, t0)
        iterations[rays.index] = np.maximum(iterations[rays.index], it)
        failure[rays.index[~ok]] = NO_INTERSECTION
        px, py = ox + tstar * dx, oy + tstar * dy
        inside = px * px + py * py <= s.semi_aperture**2
        failure[rays.index[ok & ~inside]] = APERTURE_CLIP
        keep = ok & inside
        if not keep.all():
            rays = rays.take(keep)
            tstar = tstar[keep]
        if not len(rays):
            break

        # implicit-function step from the converged root
        x = rays.ox + tstar * rays.dx
        y = rays.oy + tstar * rays.dy
        z = rays.oz + tstar * rays.dz
        r2 = x * x + y * y
        f = z - s.z - sag_profile(s.c, s.k, s.aspheric, r2)
        g = sag_slope(s.c, s.k, s.aspheric, r2)
        df = rays.dz - 2.0 * g * (x * rays.dx + y * rays.dy)
        t = tstar - f / df
        x = rays.ox + t * rays.dx
        y = rays.oy + t * rays.dy
        z = rays.oz + t * rays.dz
        n1 = _indices(system.medium_before(j), rays.wavelength)
        opl = rays.opl + n1 * t
        if j == stop_at:
            return TraceResult(
                Rays(x, y, z, rays.dx, rays.dy, rays.dz, opl, rays.wavelength, rays.index),
                failure, iterations, n_total,
            )

        n2 = _indices(surf.material, rays.wavelength)
        if system.medium_before(j) == surf.material:
            rays = Rays(x, y, z, rays.dx, rays.dy, rays.dz, opl, rays.wavelength, rays.index)
            continue
        g = sag_slope(s.c, s.k, s.aspheric, x * x + y * y)
        nx, ny = -2.0 * x * g, -2.0 * y * g
        inv = 1.0 / ad.sqrt(nx * nx + ny * ny + 1.0)
        nx, ny, nz = nx * inv, ny * inv, inv
        mu = n1 / n2
        cos1 = rays.dx * nx + rays.dy * ny + rays.dz * nz
        k2 = 1.0 - mu * mu * (1.0 - cos1 * cos1)
        tir = np.asarray(ad.value(k2)) < 0.0
        rays = Rays(x, y, z, rays.dx, rays.dy, rays.dz, opl, rays.wavelength, rays.index)
        if tir.any():
            failure[rays.index[tir]] = TIR
            rays = rays.take(~tir)
            mu, cos1, k2 = mu[~tir], _take(cos1, ~tir), _take(k2, ~tir)
            nx, ny, nz = _take(nx, ~tir), _take(ny, ~tir), _take(nz, ~tir)
            if not len(rays):
                break
        coef = ad.sqrt(k2) - mu * cos1
        rays = Rays(
            rays.ox, rays.oy, rays.oz,
            mu * rays.dx + coef * nx,
            mu * rays.dy + coef * ny,
            mu * rays.dz + coef * nz,
            rays.opl, rays.wavelength, rays.index,
        )

    if stop_at is None and len(rays):
        t = (state.image_z - rays.oz) / rays.dz
        n_img = _indices(system.surfaces[-1].material, rays.wavelength)
        rays = Rays(
            rays.ox + t * rays.dx, rays.oy + t * rays.dy, rays.oz + t * rays.dz,
            rays.dx, rays.dy, rays.dz, rays.opl + n_img * t, rays.wavelength, rays.index,
        )
    return TraceResult(rays, failure, iterations, n_total)


def _take(a, keep):
    return a[keep] if ad.is_var(a) else np.asarray(a)[keep]


# ---------------------------------------------------------------------------
# paraxial optics
# ---------------------------------------------------------------------------


def paraxial_trace(system: LensSystem, wavelength: float, y0, u0, state=None, upto=None):
    """y-nu trace; returns per-surface heights and the reduced angle n'u' after each surface."""
    if state is None:
        state = lens_state(system)
    last = len(system.surfaces) - 1 if upto is None else upto
    y = y0
    nu = u0 * refractive_index(system.object_material, wavelength)
    heights, angles = [], []
    for j in range(last + 1):
        s = state.surfaces[j]
        n1 = refractive_index(system.medium_before(j), wavelength)
        n2 = refractive_index(system.surfaces[j].material, wavelength)
        c_par = s.c + 2.0 * s.aspheric[0]
        heights.append(y)
        if j == last and upto is not None:
            break
        nu = nu - y * (n2 - n1) * c_par
        angles.append(nu)
        y = y + nu / n2 * s.d
    return heights, angles


def paraxial_effl(system: LensSystem, wavelength: float | None = None, state=None):
    """Effective focal length from a marginal ray at infinity (y = 1, u = 0)."""
    wavelength = system.reference_wavelength if wavelength is None else wavelength
    heights, angles = paraxial_trace(system, wavelength, 1.0, 0.0, state)
    nu = angles[-1]
    if abs(float(ad.value(nu))) < 1e-15:
        raise AfocalSystemError("system is afocal; EFFL is infinite")
    return -heights[0] / nu


def entrance_pupil(system: LensSystem, wavelength: float | None = None) -> EntrancePupil:
    """Paraxial image of the stop in object space (z relative to the first vertex)."""
    wavelength = system.reference_wavelength if wavelength is None else wavelength
    s = system.stop_index
    if s == 0:
        return EntrancePupil(0.0, system.surfaces[0].semi_aperture)
    h_a, _ = paraxial_trace(system, wavelength, 1.0, 0.0, upto=s)
    h_b, _ = paraxial_trace(system, wavelength, 0.0, 1.0, upto=s)
    A, B = h_a[-1], h_b[-1]
    if abs(A) < 1e-15:
        raise TraceError("stop is conjugate to infinity")
    return EntrancePupil(float(B / A), float(system.surfaces[s].semi_aperture / abs(A)))


# ---------------------------------------------------------------------------
# pupil sampling, vignetting, chief ray
# ---------------------------------------------------------------------------


def _symmetric_grid(n: int) -> np.ndarray:
    """n nodes on [-1, 1], exactly antisymmetric about 0."""
    return (2.0 * np.arange(n) - (n - 1)) / (n - 1)


def _launch(system: LensSystem, fld: FieldSpec, ux, uy, ep: EntrancePupil):
    """Origins on the tilted start wavefront for rays aimed at pupil points (ux, uy)."""
    d = fld.direction()
    ux = np.asarray(ux)
    uy = np.asarray(uy)
    s0 = system.surfaces[0]
    z_front = min(0.0, float(np.min(s0.sag(np.linspace(0, s0.semi_aperture**2, 64)))))
    diam = 2.0 * ep.radius
    lead = (max(ep.z, 0.0) - z_front + diam) / d[2] + ep.radius * np.hypot(d[0], d[1])
    qx, qy = ep.radius * ux, ep.radius * uy
    s = qx * d[0] + qy * d[1] + lead
    return (qx - s * d[0], qy - s * d[1], ep.z - s * d[2]), d


def _launch_taped(fld: FieldSpec, ux, uy, ep: EntrancePupil, lead: float):
    d = fld.direction()
    qx, qy = ep.radius * ux, ep.radius * uy
    s = qx * d[0] + qy * d[1] + lead
    return (qx - s * d[0], qy - s * d[1], ep.z - s * d[2]), d


def _lead(system: LensSystem, fld: FieldSpec, ep: EntrancePupil) -> float:
    (ox, oy, oz), d = _launch(system, fld, 0.0, 0.0, ep)
    return float(-(oz - ep.z) / d[2])


def _probe(system, fld, ux, uy, ep, wavelength):
    (ox, oy, oz), d = _launch(system, fld, ux, uy, ep)
    n = np.size(ux)
    rays = rays_from_arrays(
        np.stack(np.broadcast_arrays(ox, oy, oz), axis=1).reshape(n, 3),
        np.broadcast_to(d, (n, 3)), wavelength,
    )
    res = trace_rays(system, rays)
    ok = np.zeros(n, dtype=bool)
    ok[res.rays.index] = True
    return ok


def estimate_vignetting(
    system: LensSystem, fld: FieldSpec, probes: int = 32, refine: int = 12
) -> Vignetting:
    """Probe the nominal entrance pupil and fit the bounding ellipse of surviving rays.

    The extremes of the coarse probe grid are sharpened by bisection toward
    the next probe before the 1 % margin shrink.
    """
    ep = entrance_pupil(system)
    lam = system.reference_wavelength
    g = _symmetric_grid(probes)
    px, py = np.meshgrid(g, g)
    inside = px * px + py * py <= 1.0
    px, py = px[inside], py[inside]
    ok = _probe(system, fld, px, py, ep, lam)
    if ok.sum() < 8:
        raise VignettingError(f"field {fld.angle} deg fully vignetted ({ok.sum()} probes survive)")
    sx, sy = px[ok], py[ok]
    step = g[1] - g[0]
    ext = {}
    for name, coord, other, sign in (
        ("xmax", sx, sy, 1.0), ("xmin", sx, sy, -1.0),
        ("ymax", sy, sx, 1.0), ("ymin", sy, sx, -1.0),
    ):
        edge = coord.max() if sign > 0 else coord.min()
        rows = other[coord == edge]
        lo = np.full(len(rows), edge)
        hi = np.full(len(rows), edge + sign * step)
        for _ in range(refine):
            mid = 0.5 * (lo + hi)
            if name[0] == "x":
                good = _probe(system, fld, mid, rows, ep, lam) & (mid * mid + rows * rows <= 1.0)
            else:
                good = _probe(system, fld, rows, mid, ep, lam) & (mid * mid + rows * rows <= 1.0)
            lo = np.where(good, mid, lo)
            hi = np.where(good, hi, mid)
        ext[name] = lo.max() if sign > 0 else lo.min()
    margin = 0.99
    return Vignetting(
        dx=0.5 * (ext["xmax"] + ext["xmin"]),
        dy=0.5 * (ext["ymax"] + ext["ymin"]),
        cx=margin * 0.5 * (ext["xmax"] - ext["xmin"]),
        cy=margin * 0.5 * (ext["ymax"] - ext["ymin"]),
    )


def pupil_grid(n: int):
    """Normalized n x n Cartesian pupil samples inside the unit disk.

    Samples sit at the centers of n x n equal cells spanning [-1, 1], so each
    one stands for the same pupil area and the count inside the disk is close
    to pi/4 n^2.
    """
    if n < 3:
        raise ValueError("pupil grid needs n >= 3")
    g = (2.0 * np.arange(n) - (n - 1)) / n
    px, py = np.meshgrid(g, g)
    inside = px * px + py * py <= 1.0
    return px[inside], py[inside]


def sample_pupil(
    system: LensSystem,
    fld: FieldSpec,
    n: int,
    vignetting: Vignetting | None = None,
    wavelengths=None,
) -> RayBundle:
    """Uniform n x n pupil sampling over the vignetting ellipse, one ray per wavelength."""
    if vignetting is None:
        vignetting = estimate_vignetting(system, fld)
    wavelengths = system.wavelengths if wavelengths is None else tuple(wavelengths)
    ep = entrance_pupil(system)
    px, py = pupil_grid(n)
    ux, uy = vignetting.map(px, py)
    (ox, oy, oz), d = _launch(system, fld, ux, uy, ep)
    m = len(px)
    nw = len(wavelengths)
    origin = np.tile(np.stack([ox, oy, oz], axis=1), (nw, 1))
    return RayBundle(
        field=fld,
        wavelength=np.repeat(np.asarray(wavelengths, dtype=float), m),
        pupil=np.tile(np.stack([ux, uy], axis=1), (nw, 1)),
        origin=origin,
        direction=np.broadcast_to(d, (m * nw, 3)).copy(),
        opl=np.zeros(m * nw),
        amplitude=np.ones(m * nw),
        valid=np.ones(m * nw, dtype=bool),
        failure=np.zeros(m * nw, dtype=int),
        vignetting=vignetting,
        entrance_pupil=ep,
    )


def trace_system(system: LensSystem, bundle: RayBundle, guess: str = REFERENCE_GUESS) -> RayBundle:
    """Trace a sampled bundle to the image plane; invalid rays keep NaN coordinates."""
    rays = rays_from_arrays(bundle.origin, bundle.direction, bundle.wavelength, bundle.opl)
    res = trace_rays(system, rays, guess=guess)
    if not len(res.rays):
        raise BundleExtinct(f"no ray survives at field {bundle.field.angle} deg")
    r = res.rays
    idx = r.index
    n = len(bundle)
    origin = np.full((n, 3), np.nan)
    direction = np.full((n, 3), np.nan)
    opl = np.full(n, np.nan)
    ox, oy, oz, dx, dy, dz = r.values()
    origin[idx] = np.stack([ox, oy, oz], axis=1)
    direction[idx] = np.stack([dx, dy, dz], axis=1)
    opl[idx] = ad.value(r.opl)
    valid = np.zeros(n, dtype=bool)
    valid[idx] = True
    amplitude = np.where(valid, bundle.amplitude, 0.0)
    return replace(
        bundle, origin=origin, direction=direction, opl=opl, valid=valid,
        failure=res.failure, amplitude=amplitude,
    )


@dataclass(frozen=True)
class ChiefAim:
    """Converged chief-ray pupil point and the stop-intercept Jacobian there."""

    field: FieldSpec
    wavelength: float
    pupil: np.ndarray  # (ux, uy)
    jacobian: np.ndarray  # d(stop x, y)/d(ux, uy)
    residual: float
    entrance_pupil: EntrancePupil
    lead: float


def _stop_hit(system, fld, ep, lam, u):
    (ox, oy, oz), d = _launch(system, fld, u[0], u[1], ep)
    rays = rays_from_arrays([[float(ox), float(oy), float(oz)]], [d], lam)
    res = trace_rays(system, rays, stop_at=system.stop_index)
    if not len(res.rays):
        return None
    return np.array([float(res.rays.ox[0]), float(res.rays.oy[0])])


def _jacobian(system, fld, ep, lam, u, h=1e-6):
    jac = np.zeros((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fp = _stop_hit(system, fld, ep, lam, u + e)
        fm = _stop_hit(system, fld, ep, lam, u - e)
        if fp is None or fm is None:
            raise AimingError("chief ray clipped while aiming")
        jac[:, i] = (fp - fm) / (2 * h)
    return jac


def aim_chief(
    system: LensSystem, fld: FieldSpec, wavelength: float | None = None,
    tol: float = 1e-8, maxiter: int = 64,
) -> ChiefAim:
    """Secant (Broyden) aiming of the ray through the stop center."""
    lam = system.reference_wavelength if wavelength is None else wavelength
    ep = entrance_pupil(system, lam)
    u = np.zeros(2)
    f = _stop_hit(system, fld, ep, lam, u)
    if f is None:
        raise AimingError("chief ray start point is vignetted")
    jac = _jacobian(system, fld, ep, lam, u)
    best_u, best = u, float(np.linalg.norm(f))
    for _ in range(maxiter):
        if best < 1e-13:
            break
        try:
            step = -np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise AimingError("singular aiming Jacobian") from None
        if not np.any(step):
            break
        un = u + step
        fn = _stop_hit(system, fld, ep, lam, un)
        if fn is None:
            raise AimingError("chief ray clipped while aiming")
        jac = jac + np.outer((fn - f) - jac @ step, step) / (step @ step)
        u, f = un, fn
        res = float(np.linalg.norm(f))
        if res < best:
            best_u, best = u, res
        elif best < tol:
            break
    if best >= tol:
        raise AimingError(f"chief ray did not converge (residual {best:.3g} mm)")
    u, res = best_u, best
    jac = _jacobian(system, fld, ep, lam, u)
    return ChiefAim(fld, lam, u, jac, res, ep, _lead(system, fld, ep))


def chief_rays(system: LensSystem, aims, state: LensState | None = None) -> Rays:
    """Trace aimed chief rays to the image plane (taped when ``state`` is).

    The pupil point is corrected by one Newton step on the stop intercept with
    the converged Jacobian held fixed, which carries the implicit dependence of
    the aim on the lens parameters.  The step is applied on untaped calls too,
    so a finite difference of this function sees the same map as the tape.
    """
    if state is None:
        state = lens_state(system)
    ox, oy, oz, dd, lam = [], [], [], [], []
    for aim in aims:
        (x, y, z), d = _launch_taped(aim.field, aim.pupil[0], aim.pupil[1], aim.entrance_pupil, aim.lead)
        ox.append(x)
        oy.append(y)
        oz.append(z)
        dd.append(d)
        lam.append(aim.wavelength)
    dd = np.array(dd)
    lam = np.array(lam)
    n = len(aims)
    rays = rays_from_arrays(np.stack([ox, oy, oz], axis=1), dd, lam)
    hit = trace_rays(system, rays, state, stop_at=system.stop_index)
    if len(hit.rays) != n:
        raise AimingError("chief ray lost before the stop")
    inv = np.array([np.linalg.inv(a.jacobian) for a in aims])
    rx, ry = hit.rays.ox, hit.rays.oy
    ux = np.array([a.pupil[0] for a in aims]) - (inv[:, 0, 0] * rx + inv[:, 0, 1] * ry)
    uy = np.array([a.pupil[1] for a in aims]) - (inv[:, 1, 0] * rx + inv[:, 1, 1] * ry)
    # launch geometry per aim (constants except the corrected pupil point)
    dvec = np.array([a.field.direction() for a in aims])
    ep_r = np.array([a.entrance_pupil.radius for a in aims])
    ep_z = np.array([a.entrance_pupil.z for a in aims])
    lead = np.array([a.lead for a in aims])
    qx, qy = ep_r * ux, ep_r * uy
    s = qx * dvec[:, 0] + qy * dvec[:, 1] + lead
    rays = Rays(
        qx - s * dvec[:, 0], qy - s * dvec[:, 1], ep_z - s * dvec[:, 2],
        dvec[:, 0], dvec[:, 1], dvec[:, 2], np.zeros(n), lam, np.arange(n),
    )
    res = trace_rays(system, rays, state)
    if len(res.rays) != n:
        raise AimingError("chief ray lost during trace")
    return res.rays


def chief_ray(system: LensSystem, fld: FieldSpec, wavelength: float | None = None) -> Ray:
    """Chief ray of ``fld`` traced to the image plane."""
    aim = aim_chief(system, fld, wavelength)
    r = chief_rays(system, [aim])
    ox, oy, oz, dx, dy, dz = r.values()
    return Ray(
        np.array([ox[0], oy[0], oz[0]]), np.array([dx[0], dy[0], dz[0]]),
        float(ad.value(r.opl)[0]), 1.0, aim.wavelength,
    )


# ---------------------------------------------------------------------------
# initial-guess study (progressive-approximation oracle)
# ---------------------------------------------------------------------------


def progressive_intersect(surface: Surface, o, d, step: float = 1e-4, t_max: float | None = None,
                          vertex_z: float = 0.0, chunk: int = 4096):
    """First sign change of F along each ray by marching, refined by bisection.

    Gradient-free reference for the Newton solutions.  Returns ``(t, found)``.
    """
    o = np.atleast_2d(np.asarray(o, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    c, k, a = surface.curvature, surface.conic, surface.aspheric
    n = len(o)
    if t_max is None:
        t_max = 4.0 * (np.max(np.abs(o[:, 2] - vertex_z)) + surface.semi_aperture)
    ts = np.arange(0.0, t_max + step, step)

    def fval(t, rows):
        x = o[rows, 0, None] + t * d[rows, 0, None]
        y = o[rows, 1, None] + t * d[rows, 1, None]
        z = o[rows, 2, None] + t * d[rows, 2, None]
        f, _, dom = _surface_eval(c, k, a, vertex_z, x, y, z)
        return np.where(dom, f, np.nan)

    t_lo = np.full(n, np.nan)
    found = np.zeros(n, dtype=bool)
    rows_all = np.arange(n)
    for s0 in range(0, len(ts), chunk):
        todo = rows_all[~found]
        if not todo.size:
            break
        seg = ts[s0 : s0 + chunk + 1]
        fv = fval(seg[None, :], todo)
        sign_change = (fv[:, :-1] <= 0) & (fv[:, 1:] > 0) | (fv[:, :-1] >= 0) & (fv[:, 1:] < 0)
        hit = sign_change.any(axis=1)
        first = np.argmax(sign_change, axis=1)
        t_lo[todo[hit]] = seg[first[hit]]
        found[todo[hit]] = True
    lo = t_lo.copy()
    hi = t_lo + step
    rows = np.flatnonzero(found)
    flo = fval(lo[rows, None], rows)[:, 0]
    for _ in range(60):
        mid = 0.5 * (lo[rows] + hi[rows])
        fm = fval(mid[:, None], rows)[:, 0]
        same = np.sign(fm) == np.sign(flo)
        lo[rows] = np.where(same, mid, lo[rows])
        flo = np.where(same, fm, flo)
        hi[rows] = np.where(same, hi[rows], mid)
    return 0.5 * (lo + hi), found


@dataclass(frozen=True)
class GuessStudy:
    field: float
    strategy: str
    max_iterations: int
    mean_iterations: float
    accuracy: float  # fraction of rays agreeing with the oracle inside the aperture
    n_rays: int
    mismatches: int = 0  # oracle-inside rays that Newton missed or solved elsewhere


def sample_aperture_rays(surface: Surface, field_deg: float, n_rays: int = 1000,
                         fill: float = 1.0, start_gap: float = 1.0, seed: int = 0):
    """Rays at ``field_deg`` aimed at points spread uniformly over the clear aperture.

    Each ray passes through an on-surface point ``(x, y, sag)`` and starts
    ``start_gap`` mm ahead of the surface's axial extent.
    """
    rng = np.random.default_rng(seed)
    r = surface.semi_aperture * fill * np.sqrt(rng.random(n_rays))
    phi = 2.0 * np.pi * rng.random(n_rays)
    x, y = r * np.cos(phi), r * np.sin(phi)
    q = np.stack([x, y, np.asarray(surface.sag(r * r))], axis=1)
    d = FieldSpec(field_deg).direction()
    zs = surface.sag(np.linspace(0.0, surface.semi_aperture**2, 256))
    back = (q[:, 2] - np.min(zs) + start_gap) / d[2]
    o = q - back[:, None] * d
    return o, np.broadcast_to(d, o.shape).copy()


def compare_initial_guess(surface: Surface, field_deg: float, n_rays: int = 1000,
                          fill: float = 1.0, seed: int = 0, oracle_step: float = 1e-4):
    """Reproduce the initial-guess comparison for one surface and field.

    Returns one :class:`GuessStudy` per strategy (reference points, tangent plane).
    """
    o, d = sample_aperture_rays(surface, field_deg, n_rays, fill, seed=seed)
    t_true, found = progressive_intersect(surface, o, d, step=oracle_step)
    p_true = o + t_true[:, None] * d
    true_inside = found & (p_true[:, 0] ** 2 + p_true[:, 1] ** 2 <= surface.semi_aperture**2)
    out = []
    refs = build_reference_points(surface, REF_RADII, REF_AZIMUTHS)
    for strategy in (REFERENCE_GUESS, TANGENT_GUESS):
        if strategy == REFERENCE_GUESS:
            t0, ok0 = reference_guess(o, d, refs.points)
            t0 = np.where(ok0, t0, np.nan)
        else:
            t0 = tangent_plane_guess(o, d)
        t, ok, it = newton_solve(surface.curvature, surface.conic, surface.aspheric, 0.0, o, d, t0)
        p = o + t[:, None] * d
        inside = ok & (p[:, 0] ** 2 + p[:, 1] ** 2 <= surface.semi_aperture**2)
        agree = inside & true_inside & (np.abs(t - t_true) < 1e-6)
        it_in = it[true_inside] if true_inside.any() else np.zeros(1, dtype=int)
        out.append(
            GuessStudy(
                field_deg, strategy, int(it_in.max()), float(it_in.mean()),
                float(agree.sum() / max(true_inside.sum(), 1)), int(true_inside.sum()),
                int(true_inside.sum() - agree.sum()),
            )
        )
    return out
