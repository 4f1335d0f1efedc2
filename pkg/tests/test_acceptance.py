"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict with its measured numbers;
``conftest.py`` prints the collected lines at the end of the pytest run.
Run ``pytest tests/test_acceptance.py`` to see just this summary.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cohlens import adjoint as ad
from cohlens.cli import dispatch
from cohlens.geometry import EVEN_ASPHERE
from cohlens.imaging import diffraction_mtf, mtf_from_psf
from cohlens.losses import GAP_SAMPLES, WEIGHTS, check_gradients, combine, loss_dist, loss_gap, loss_ttl
from cohlens.optimizer import OptimizerConfig, optimize
from cohlens.psf import coherent_amplitude, coherent_psf_node, naive_coherent_psf, psf_three_channel
from cohlens.trace import FieldSpec, compare_initial_guess, sample_pupil, trace_system

from conftest import fixture_path, load

LAM = 587.6


@pytest.fixture
def verdict(record_property):
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        record_property("acceptance", line)
        print(line)
        return ok

    return record


def _converging(n, seed=0):
    rng = np.random.default_rng(seed)
    u = np.linspace(-1.0, 1.0, n)
    ux, uy = (a.ravel() for a in np.meshgrid(u, u))
    px, py = 1e-3 * rng.normal(size=(2, n * n))
    s = 1.0 / np.hypot(5.0, 1.0)
    dx, dy = -ux * s, -uy * s
    dz = np.sqrt(1.0 - dx**2 - dy**2)
    opl = 10.0 + 2e-4 * (ux**2 + uy**2) ** 2
    return [opl, px, py, dx, dy, dz, np.ones(n * n)]


def _grid(m, pitch=0.6e-3):
    g = (np.arange(m) - (m - 1) / 2) * pitch
    return [a.ravel() for a in np.meshgrid(g, g)]


def test_1_adjoint_matches_finite_differences(verdict):
    t0 = time.perf_counter()
    errors = {}
    for name in ("singlet", "doublet", "high_asphere"):
        doc = load(name)
        errors[name] = check_gradients(doc.system, doc.spec).max_rel_error
    elapsed = time.perf_counter() - t0
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + f"; {elapsed:.1f} s"
    assert verdict(1, worst < 1e-5 and elapsed < 120, detail)


def test_2_psf_node_equals_naive_tape(verdict):
    inputs = _converging(32) + _grid(15)
    w = np.random.default_rng(1).normal(size=15 * 15)
    t0 = time.perf_counter()
    grads = []
    for fn in (coherent_psf_node, naive_coherent_psf):
        tape = ad.Tape()
        leaves = [tape.variable(a.copy()) for a in inputs]
        psf = fn(LAM, *leaves)
        psf = psf / ad.sum(psf)
        g = tape.backward(ad.sum(psf * w))
        grads.append([g[v] for v in leaves])
    elapsed = time.perf_counter() - t0
    diff = max(float(np.abs(a - b).max()) for a, b in zip(*grads))
    assert verdict(2, diff <= 1e-10 and elapsed < 30, f"max |node - naive| {diff:.2e}; {elapsed:.2f} s")


def test_3_psf_node_memory(verdict):
    n, m = 129 * 129, 63 * 63
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    leaves = [tape.variable(rng.normal(size=n)) for _ in range(7)]
    leaves += [tape.variable(rng.normal(size=m)) for _ in range(2)]
    before = tape.saved_bytes()
    coherent_psf_node(LAM, *leaves)
    saved = tape.saved_bytes() - before
    ratio = n * m * 16 / saved
    assert verdict(3, ratio >= 10, f"saved {saved} B vs baseline {n * m * 16} B, ratio {ratio:.0f}x")


def test_4_initial_guess_study(verdict):
    surface = next(s for s in load("high_asphere").system.surfaces if s.kind == EVEN_ASPHERE)
    t0 = time.perf_counter()
    studies = {f: compare_initial_guess(surface, f, 1000) for f in (20.0, 25.0, 30.0, 35.0, 40.0)}
    elapsed = time.perf_counter() - t0
    ref = [s for rows in studies.values() for s in rows if s.strategy == "reference"]
    tan40 = next(s for s in studies[40.0] if s.strategy == "tangent")
    ok = (all(s.max_iterations <= 6 and s.accuracy == 1.0 for s in ref)
          and tan40.mismatches >= 1 and elapsed < 60)
    detail = (f"reference max it {max(s.max_iterations for s in ref)}, min accuracy "
              f"{100 * min(s.accuracy for s in ref):.1f}%; tangent at 40 deg {tan40.mismatches} mismatches; "
              f"{elapsed:.1f} s")
    assert verdict(4, ok, detail)


def test_5_airy_pattern_and_mtf(verdict):
    system = load("ideal").system
    fld = FieldSpec(0.0)
    t0 = time.perf_counter()
    b = trace_system(system, sample_pupil(system, fld, 129, wavelengths=[LAM]))
    ok = b.valid
    d, p = b.direction[ok], b.origin[ok]
    na = float(np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2).max())
    lam_mm = LAM * 1e-6

    def intensity(r):
        r = np.atleast_1d(r)
        a = coherent_amplitude(LAM, b.opl[ok], p[:, 0], p[:, 1], d[:, 0], d[:, 1], d[:, 2],
                               np.ones(ok.sum()), r, np.zeros_like(r))
        return np.abs(a) ** 2

    radii = np.linspace(0.0, 3e-3, 600)
    prof = intensity(radii)
    i = int(np.argmax(np.diff(np.sign(np.diff(prof))) > 0)) + 1  # first local minimum
    zero = minimize_scalar(lambda r: intensity(r)[0], bounds=(radii[i - 2], radii[i + 2]), method="bounded").x
    analytic = 1.22 * lam_mm / (2 * na)
    zero_err = abs(zero / analytic - 1)

    psf = psf_three_channel(system, fld, 129)
    cutoff = 2 * na / lam_mm
    mtf_err = 0.0
    for curve in mtf_from_psf(psf.intensity[1], psf.pitch):
        keep = curve.frequency <= 0.8 * cutoff
        ideal = diffraction_mtf(curve.frequency[keep] / cutoff)
        mtf_err = max(mtf_err, float(np.abs(curve.modulation[keep] - ideal).max()))
    elapsed = time.perf_counter() - t0
    detail = f"first zero off by {100 * zero_err:.2f}%, MTF max error {mtf_err:.4f}; {elapsed:.1f} s"
    assert verdict(5, zero_err < 0.03 and mtf_err <= 0.02 and elapsed < 60, detail)


def test_6_half_wave_pair_cancels(verdict):
    gx, gy = _grid(63)
    z = np.zeros(2)
    opl = np.array([7.0, 7.0 + LAM * 1e-6 / 2])
    peak = float(coherent_psf_node(LAM, opl, z, z, z, z, np.ones(2), np.ones(2), gx, gy).max())
    assert verdict(6, peak <= 1e-20, f"max intensity {peak:.2e}")


def test_7_perturbed_singlet_recovers(verdict):
    doc = load("singlet")
    s = doc.system
    s = s.with_surface(1, curvature=s.surfaces[1].curvature * 1.05)
    t0 = time.perf_counter()
    res = optimize(s, doc.spec, OptimizerConfig(lr=1e-3, steps=200))
    elapsed = time.perf_counter() - t0
    traj = res.trajectory
    target = doc.spec.target_effl
    dev = np.array([abs(r.effl - target) / target for r in traj])
    inside = dev < 5e-3
    entered = int(np.argmax(inside)) if inside.any() else len(dev)
    stays = bool(inside[entered:].all()) and inside.any()
    ratio = traj[-1].losses["spot"] / traj[0].losses["spot"]
    min_gap = min(r.min_gap for r in traj)
    ok = (not res.aborted and len(traj) == 201 and ratio <= 0.5 and dev[-1] < 5e-3 and stays
          and min_gap > 0 and elapsed < 300)
    detail = (f"spot ratio {ratio:.3f}, EFFL off {100 * dev[0]:.2f}% at start, inside 0.5% from step "
              f"{entered} on, final {100 * dev[-1]:.3f}%, min gap {min_gap:.3f} mm; {elapsed:.0f} s")
    assert verdict(7, ok, detail)


def test_8_saturated_constants_and_weights(verdict):
    doc = load("singlet")
    s, spec = doc.system, doc.spec
    ttl, gap = loss_ttl(s, spec), loss_gap(s, spec)
    dist = loss_dist(s, s.max_field, spec)
    exact = (ttl == spec.ttl_max and gap == -len(s.surfaces) * GAP_SAMPLES * spec.eps_gap
             and dist == spec.eps_dist)
    terms = {"spot": 0.013, "ttl": ttl, "effl": 0.25, "gap": gap, "dist": dist}
    total = combine(terms)
    expected = 0.013 + 0.5 * ttl + 10.0 * 0.25 + 3.0 * gap + 5.0 * dist
    ok = exact and WEIGHTS == {"ttl": 0.5, "effl": 10.0, "gap": 3.0, "dist": 5.0} and total == expected
    assert verdict(8, ok, f"ttl {ttl}, gap {gap}, dist {dist}, combined {float(total)!r}")


def test_9_cli_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv("COHLENS_THREADS", raising=False)
    lens = str(fixture_path("singlet"))
    runs = {
        "trace": (["trace", "--field", "0,10", "--pupil", "9"], ["trace.csv"]),
        "psf": (["psf", "--field", "10", "--pupil", "17", "--size", "31"],
                ["psf_486.1nm.csv", "psf_587.6nm.csv", "psf_656.3nm.csv", "psf_meta.txt"]),
        "optimize": (["optimize", "--steps", "5"], ["trajectory.jsonl", "optimized.lens"]),
    }
    same = {}
    for name, (argv, artifacts) in runs.items():
        blobs = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            code = dispatch(["--out", str(out), "--deterministic", argv[0], "--lens", lens, *argv[1:]])
            blobs.append([(out / a).read_bytes() for a in artifacts] if code == 0 else None)
        same[name] = blobs[0] is not None and blobs[0] == blobs[1]
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items())
    assert verdict(9, all(same.values()), detail)
