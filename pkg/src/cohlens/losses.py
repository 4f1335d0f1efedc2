"""Optical merit terms and their weighted combination.

Every term accepts a :class:`~cohlens.system.LensState`; with a taped state
the result is a :class:`~cohlens.adjoint.Var` and can be differentiated.
Max/min kinks follow the tape convention: at an exact tie the constant
branch is active, so the subgradient there is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import adjoint as ad
from .geometry import sag_profile
from .system import LensSystem, lens_state
from .trace import (
    BundleExtinct,
    ChiefAim,
    FieldSpec,
    Ray,
    RayBundle,
    Vignetting,
    aim_chief,
    chief_rays,
    estimate_vignetting,
    paraxial_effl,
    rays_from_arrays,
    sample_pupil,
    trace_rays,
)

WEIGHTS = {"ttl": 0.5, "effl": 10.0, "gap": 3.0, "dist": 5.0}
GAP_SAMPLES = 256
V_SMALL = 1e-3  # rad, small-angle chief ray for the distortion focal length
N_FIELDS = 5
SPOT_PUPIL = 13


@dataclass(frozen=True)
class DesignSpec:
    """Design targets.

    ``fov`` is the full field angle in degrees and ``image_height`` the full
    image diagonal in mm, so the focal-length target is
    ``image_height / (2 tan(fov / 2))``.
    """

    ttl_max: float
    fov: float
    image_height: float
    eps_gap: float = 0.02
    eps_dist: float = 0.005

    def __post_init__(self):
        for name in ("ttl_max", "fov", "image_height", "eps_gap", "eps_dist"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.eps_dist < 0.2:
            raise ValueError("eps_dist must lie in (0, 0.2)")
        if not self.fov < 180:
            raise ValueError("fov must be below 180 degrees")

    @property
    def target_effl(self) -> float:
        return self.image_height / (2.0 * math.tan(math.radians(self.fov) / 2.0))


# Reference design tasks on a 6 mm diagonal sensor.
DESIGN_TASKS = {
    "double_gauss": DesignSpec(ttl_max=12.39, fov=43.0, image_height=6.0),
    "enna": DesignSpec(ttl_max=10.74, fov=63.2, image_height=6.0),
    "aspheric": DesignSpec(ttl_max=5.28, fov=70.0, image_height=6.0),
}


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------


def loss_ttl(system: LensSystem, spec: DesignSpec, state=None):
    """max(total track, TTL_max): flat (zero gradient) while under budget."""
    state = lens_state(system) if state is None else state
    total = state.surfaces[0].d
    for s in state.surfaces[1:]:
        total = total + s.d
    return ad.maximum(total, spec.ttl_max)


def loss_effl(system: LensSystem, spec: DesignSpec, state=None):
    """|paraxial EFFL at the reference wavelength - target|."""
    return ad.absolute(paraxial_effl(system, state=state) - spec.target_effl)


def loss_gap(system: LensSystem, spec: DesignSpec, state=None, samples: int = GAP_SAMPLES):
    """-sum over gaps and radial samples of min(axial gap, eps_gap).

    One gap per surface: to the next surface, and for the last surface to
    the flat image plane.  Radii run from the axis to the smaller of the two
    semi-apertures.
    """
    state = lens_state(system) if state is None else state
    surfs = state.surfaces
    total = 0.0
    for j, s in enumerate(surfs):
        nxt = surfs[j + 1] if j + 1 < len(surfs) else None
        r_max = s.semi_aperture if nxt is None else min(s.semi_aperture, nxt.semi_aperture)
        r2 = (r_max * np.linspace(0.0, 1.0, samples)) ** 2
        gap = s.d - sag_profile(s.c, s.k, s.aspheric, r2)
        if nxt is not None:
            gap = gap + sag_profile(nxt.c, nxt.k, nxt.aspheric, r2)
        total = total + ad.sum(ad.minimum(gap, spec.eps_gap))
    return -total


def min_gap(system: LensSystem, samples: int = GAP_SAMPLES) -> float:
    """Smallest axial gap (mm) over the same samples as :func:`loss_gap`."""
    surfs = system.surfaces
    best = math.inf
    for j, s in enumerate(surfs):
        nxt = surfs[j + 1] if j + 1 < len(surfs) else None
        r_max = s.semi_aperture if nxt is None else min(s.semi_aperture, nxt.semi_aperture)
        r2 = (r_max * np.linspace(0.0, 1.0, samples)) ** 2
        gap = s.thickness - sag_profile(s.curvature, s.conic, s.aspheric, r2)
        if nxt is not None:
            gap = gap + sag_profile(nxt.curvature, nxt.conic, nxt.aspheric, r2)
        best = min(best, float(np.min(gap)))
    return best


def spot_rms(x, y, xc, yc):
    """RMS radius of image points about the chief-ray point."""
    dx = x - xc
    dy = y - yc
    return ad.sqrt(ad.mean(dx * dx + dy * dy))


def loss_spot(bundle: RayBundle, chief: Ray) -> float:
    """RMS spot radius (mm) of a traced bundle about a chief ray, all wavelengths."""
    ok = bundle.valid
    if not ok.any():
        raise BundleExtinct("no valid ray in bundle")
    p = bundle.origin[ok]
    return float(spot_rms(p[:, 0], p[:, 1], chief.origin[0], chief.origin[1]))


def relative_distortion(r_chief, r_small, angle_rad: float, eps_dist: float):
    """max(|(r - f_d tan v) / (f_d tan v)|, eps) with f_d = r_small / tan(V_SMALL)."""
    if angle_rad == 0.0:
        raise ValueError("distortion is undefined on axis")
    dffl = r_small / math.tan(V_SMALL)
    ideal = dffl * math.tan(angle_rad)
    return ad.maximum(ad.absolute((r_chief - ideal) / ideal), eps_dist)


def _height(rays, i):
    x = rays.ox[i]
    y = rays.oy[i]
    return ad.sqrt(x * x + y * y)


def loss_dist(system: LensSystem, angle: float, spec: DesignSpec) -> float:
    """Distortion term at one nonzero field angle (degrees)."""
    if angle == 0:
        raise ValueError("distortion is undefined on axis")
    aims = [aim_chief(system, FieldSpec(angle)), aim_chief(system, FieldSpec(math.degrees(V_SMALL)))]
    r = chief_rays(system, aims)
    return float(relative_distortion(_height(r, 0), _height(r, 1), math.radians(angle), spec.eps_dist))


# ---------------------------------------------------------------------------
# combined merit with frozen sampling
# ---------------------------------------------------------------------------


def field_set(system: LensSystem, n: int = N_FIELDS) -> tuple[float, ...]:
    """``n`` field angles (deg) uniform in tan from 0 to the largest system field."""
    t = math.tan(math.radians(system.max_field))
    return tuple(math.degrees(math.atan(t * i / (n - 1))) for i in range(n))


@dataclass(frozen=True)
class FieldSample:
    field: FieldSpec
    vignetting: Vignetting
    aim: ChiefAim
    origin: np.ndarray
    direction: np.ndarray
    wavelength: np.ndarray


@dataclass(frozen=True)
class Sampling:
    """Pupil samples and chief-ray aims held fixed while a merit is differentiated."""

    fields: tuple[FieldSample, ...]
    small: ChiefAim
    n_pupil: int


def freeze_sampling(system: LensSystem, fields=None, n_pupil: int = SPOT_PUPIL,
                    vignetting=None) -> Sampling:
    """Sample the pupil and aim the chief rays for the current lens.

    ``vignetting`` may pass previously fitted ellipses (one per field) to
    skip the probe fit.
    """
    fields = field_set(system) if fields is None else tuple(fields)
    out = []
    for i, angle in enumerate(fields):
        fld = FieldSpec(float(angle))
        vig = estimate_vignetting(system, fld) if vignetting is None else vignetting[i]
        b = sample_pupil(system, fld, n_pupil, vig)
        out.append(FieldSample(fld, vig, aim_chief(system, fld), b.origin, b.direction, b.wavelength))
    small = aim_chief(system, FieldSpec(math.degrees(V_SMALL)))
    return Sampling(tuple(out), small, n_pupil)


def merit_terms(system: LensSystem, spec: DesignSpec, sampling: Sampling, state=None) -> dict:
    """All five terms for ``state`` using fixed sampling (Vars when taped)."""
    state = lens_state(system) if state is None else state
    chiefs = chief_rays(system, [fs.aim for fs in sampling.fields] + [sampling.small], state)
    spots = []
    for i, fs in enumerate(sampling.fields):
        res = trace_rays(system, rays_from_arrays(fs.origin, fs.direction, fs.wavelength), state)
        r = res.rays
        if not len(r):
            raise BundleExtinct(f"no ray survives at field {fs.field.angle} deg")
        spots.append(spot_rms(r.ox, r.oy, chiefs.ox[i], chiefs.oy[i]))
    spot = spots[0]
    for s in spots[1:]:
        spot = spot + s
    spot = spot / len(spots)

    r_small = _height(chiefs, len(sampling.fields))
    dist = spec.eps_dist
    for i, fs in enumerate(sampling.fields):
        if fs.field.angle == 0.0:
            continue
        rel = relative_distortion(_height(chiefs, i), r_small, math.radians(fs.field.angle), spec.eps_dist)
        dist = ad.maximum(rel, dist)

    return {
        "spot": spot,
        "ttl": loss_ttl(system, spec, state),
        "effl": loss_effl(system, spec, state),
        "gap": loss_gap(system, spec, state),
        "dist": dist,
    }


def combine(terms: dict, weights: dict = WEIGHTS):
    """L_spot + sum of weighted constraint terms."""
    total = terms["spot"]
    for name in ("ttl", "effl", "gap", "dist"):
        total = total + weights[name] * terms[name]
    return total


@dataclass
class OpticalLossReport:
    spot: float
    ttl: float
    effl: float
    gap: float
    dist: float
    weights: dict
    total: float
    gradient: np.ndarray | None = None  # d total / d trainable, ParamVector order
    labels: list = field(default_factory=list)
    grad_norms: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("spot", "ttl", "effl", "gap", "dist", "total")}
        out["weights"] = dict(self.weights)
        out["grad_norms"] = dict(self.grad_norms)
        return out


def loss_optic(
    system: LensSystem,
    spec: DesignSpec,
    fields=None,
    sampling: Sampling | None = None,
    weights: dict = WEIGHTS,
    gradient: bool = True,
) -> OpticalLossReport:
    """Evaluate the combined optical merit, and its gradient when requested."""
    if sampling is None:
        sampling = freeze_sampling(system, fields)
    labels = system.param_vector().trainable().labels()
    if not gradient:
        terms = merit_terms(system, spec, sampling)
        vals = {k: float(ad.value(v)) for k, v in terms.items()}
        return OpticalLossReport(**vals, weights=dict(weights), total=float(combine(vals, weights)),
                                 labels=labels)
    tape = ad.Tape()
    state = lens_state(system, tape)
    terms = merit_terms(system, spec, sampling, state)
    total = combine(terms, weights)
    vals = {k: float(ad.value(v)) for k, v in terms.items()}
    grad = _grad(tape, total, state.leaves)
    norms = {}
    for name, term in terms.items():
        w = 1.0 if name == "spot" else weights[name]
        norms[name] = float(np.linalg.norm(w * _grad(tape, term, state.leaves)))
    return OpticalLossReport(**vals, weights=dict(weights), total=float(ad.value(total)),
                             gradient=grad, labels=labels, grad_norms=norms)


def _grad(tape, out, leaves) -> np.ndarray:
    if not ad.is_var(out) or not leaves:
        return np.zeros(len(leaves))
    g = tape.backward(out, wrt=leaves)
    return np.array([float(g[v]) for v in leaves])


def merit_function(system: LensSystem, spec: DesignSpec, sampling: Sampling, weights: dict = WEIGHTS):
    """Scalar merit of the trainable parameter vector with frozen sampling."""

    def f(x):
        s = system.with_trainable(x)
        return float(ad.value(combine(merit_terms(s, spec, sampling), weights)))

    return f


def fd_steps(system: LensSystem, rel: float = 1e-6) -> np.ndarray:
    """Finite-difference steps sized so each moves the sag/position by ~``rel`` mm."""
    steps = []
    for e in system.param_vector().trainable():
        r = system.surfaces[e.surface].semi_aperture
        if e.kind == "c":
            h = 2.0 * rel / r**2
        elif e.kind == "d":
            h = rel
        elif e.kind == "k":
            c = abs(system.surfaces[e.surface].curvature)
            h = max(8.0 * rel / max(c**3 * r**4, 1e-12), 1e-6) if c else 1e-3
            h = min(h, 1e-2)
        else:
            h = rel / r ** (2 * int(e.kind[1:]))
        steps.append(h)
    return np.array(steps)


@dataclass
class GradCheck:
    labels: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if len(self.rel_error) else 0.0


def check_gradients(system: LensSystem, spec: DesignSpec, sampling: Sampling | None = None,
                    floor: float = 1e-10) -> GradCheck:
    """Compare the taped merit gradient with a five-point finite difference."""
    if sampling is None:
        sampling = freeze_sampling(system)
    rep = loss_optic(system, spec, sampling=sampling)
    num = ad.finite_difference(merit_function(system, spec, sampling), system.trainable_values(),
                               fd_steps(system), order=4)
    err = np.abs(rep.gradient - num) / np.maximum(np.abs(num), floor)
    err = np.where(np.abs(rep.gradient - num) <= floor, 0.0, err)
    return GradCheck(rep.labels, rep.gradient, num, err)
