"""Command-line entry point.

Subcommands write their artifacts under ``--out``.  Exit status: 0 on
success, 1 on usage or input errors, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
from pathlib import Path
import sys

import numpy as np

from .geometry import EVEN_ASPHERE, SagDomainError
from .imaging import ImageError, degrade, load_scene, mtf_from_psf, system_psf_provider, write_pnm
from .losses import DesignSpec, check_gradients, freeze_sampling, loss_optic, loss_spot
from .optimizer import OptimizationAborted, OptimizerConfig, PSFMeritHook, optimize
from .prescription import PrescriptionError, emit_prescription, read_prescription
from .psf import PSF_PITCH, PSF_SIZE, PUPIL_SAMPLES, ExtinctChannel, psf_three_channel
from .trace import (
    FAILURE_NAMES,
    FieldSpec,
    TraceError,
    chief_ray,
    compare_initial_guess,
    sample_pupil,
    trace_system,
)

NUMERICAL_ERRORS = (TraceError, ExtinctChannel, OptimizationAborted, SagDomainError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _blocks(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWSxCOLS, got {text!r}") from None


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_text(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()), encoding="utf-8")


def _load(args):
    doc = read_prescription(args.lens)
    return doc.system, doc.spec


def _spec(args, spec: DesignSpec | None) -> DesignSpec:
    if getattr(args, "spec", None):
        spec = read_prescription(args.spec).spec
    if spec is None:
        raise UsageError("no [spec] block in the lens file and no --spec given")
    return spec


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_trace(args, out: Path) -> None:
    system, _ = _load(args)
    rows = []
    for angle in args.field:
        b = trace_system(system, sample_pupil(system, FieldSpec(angle), args.pupil))
        for i in range(len(b)):
            p = b.origin[i]
            rows.append([
                _fmt(angle), _fmt(b.wavelength[i]), _fmt(b.pupil[i, 0]), _fmt(b.pupil[i, 1]),
                _fmt(p[0]), _fmt(p[1]), _fmt(b.opl[i]), int(b.valid[i]), FAILURE_NAMES[b.failure[i]],
            ])
    _write_csv(out / "trace.csv",
               ["field_deg", "wavelength_nm", "px", "py", "x_mm", "y_mm", "opl_mm", "valid", "failure"], rows)


def cmd_spot(args, out: Path) -> None:
    system, spec = _load(args)
    rows = []
    report = {}
    for angle in args.field:
        fld = FieldSpec(angle)
        b = trace_system(system, sample_pupil(system, fld, args.pupil))
        cr = chief_ray(system, fld)
        ok = b.valid
        for lam, p in zip(b.wavelength[ok], b.origin[ok]):
            rows.append([_fmt(angle), _fmt(lam), _fmt(p[0] - cr.origin[0]), _fmt(p[1] - cr.origin[1])])
        report[f"spot_rms_mm[{angle:g}]"] = _fmt(loss_spot(b, cr))
    _write_csv(out / "spot.csv", ["field_deg", "wavelength_nm", "dx_mm", "dy_mm"], rows)
    if spec is not None:
        rep = loss_optic(system, spec, gradient=False)
        for k, v in rep.as_dict().items():
            if not isinstance(v, dict):
                report[f"L_{k}"] = _fmt(v)
    _write_text(out / "spot_report.txt", report)


def cmd_psf(args, out: Path) -> None:
    system, _ = _load(args)
    fld = FieldSpec(args.field, args.azimuth)
    psf = psf_three_channel(system, fld, args.pupil, args.size, args.pitch * 1e-3)
    for lam, chan in zip(psf.wavelengths, psf.intensity):
        tag = f"{lam:g}nm"
        _write_csv(out / f"psf_{tag}.csv", [f"x{j}" for j in range(psf.size)],
                   [[_fmt(v) for v in row] for row in chan])
        peak = chan.max()
        write_pnm(out / f"psf_{tag}.pgm", chan / peak if peak > 0 else chan, bits=16)
    _write_text(out / "psf_meta.txt", {
        "center_x_mm": _fmt(psf.center[0]),
        "center_y_mm": _fmt(psf.center[1]),
        "pitch_mm": _fmt(psf.pitch),
        "size": psf.size,
        "field_deg": _fmt(args.field),
        "azimuth_deg": _fmt(args.azimuth),
        "wavelengths_nm": ", ".join(_fmt(w) for w in psf.wavelengths),
        "normalization": psf.normalization,
        "image_rows": "y ascending (row 0 = most negative y)",
    })


def cmd_mtf(args, out: Path) -> None:
    system, _ = _load(args)
    psf = psf_three_channel(system, FieldSpec(args.field), args.pupil, args.size, args.pitch * 1e-3)
    rows = []
    for lam, chan in zip(psf.wavelengths, psf.intensity):
        for curve in mtf_from_psf(chan, psf.pitch, lam):
            for f, m in zip(curve.frequency, curve.modulation):
                rows.append([_fmt(lam), curve.direction, _fmt(f), _fmt(m)])
    _write_csv(out / "mtf.csv", ["wavelength_nm", "direction", "frequency_cyc_per_mm", "modulation"], rows)


def _sharpness_hook(fields, weight):
    """Negative PSF energy concentration (sum of squares), a stand-in external merit."""

    def evaluate(psfs):
        value = -sum(float(np.sum(p * p)) for p in psfs)
        return value, [-2.0 * p for p in psfs]

    return PSFMeritHook(fields, evaluate, weight, n_pupil=17, size=31)


def cmd_optimize(args, out: Path) -> None:
    system, spec = _load(args)
    spec = _spec(args, spec)
    config = OptimizerConfig(lr=args.lr, steps=args.steps, log_every=args.log_every)
    hook = _sharpness_hook(args.psf_fields, args.psf_weight) if args.psf_fields else None
    res = optimize(system, spec, config, hook)
    res.write_log(out / "trajectory.jsonl")
    (out / "optimized.lens").write_text(emit_prescription(res.system, spec), encoding="utf-8")
    last = res.trajectory[-1]
    print(f"steps={last.step} total={last.total:.6g} spot_mm={last.losses['spot']:.6g} effl={last.effl:.6g}")
    if res.aborted:
        raise OptimizationAborted(res.message)


def cmd_gradcheck(args, out: Path) -> None:
    system, spec = _load(args)
    spec = _spec(args, spec)
    gc = check_gradients(system, spec, freeze_sampling(system))
    lines = [f"{'parameter':<10} {'analytic':>22} {'finite-diff':>22} {'rel.err':>10}"]
    for lab, a, n, e in zip(gc.labels, gc.analytic, gc.numeric, gc.rel_error):
        lines.append(f"{lab:<10} {a:>22.14g} {n:>22.14g} {e:>10.3g}")
    lines.append(f"max relative error: {gc.max_rel_error:.3g}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    if gc.max_rel_error > args.tol:
        raise FloatingPointError(f"gradient mismatch {gc.max_rel_error:.3g} > {args.tol:g}")


def cmd_render(args, out: Path) -> None:
    system, _ = _load(args)
    scene = load_scene(args.image, system.sensor_pitch * 1e-3)
    provider = system_psf_provider(system, args.pupil, args.size)
    img = degrade(scene, provider, args.blocks, args.noise, args.seed)
    write_pnm(out / "degraded.ppm", img.data, bits=args.bits)


def cmd_compare_init(args, out: Path) -> None:
    system, _ = _load(args)
    j = args.surface
    if j is None:
        j = next((i for i, s in enumerate(system.surfaces) if s.kind == EVEN_ASPHERE), None)
        if j is None:
            raise UsageError("lens has no even-asphere surface; pass --surface")
    surface = system.surfaces[j]
    rows = []
    lines = [f"surface {j}: {args.rays} rays per field",
             f"{'field':>6} {'strategy':>10} {'max it':>7} {'mean it':>8} {'accuracy':>9}"]
    for angle in args.fields:
        for r in compare_initial_guess(surface, angle, args.rays, seed=args.seed):
            lines.append(f"{angle:>6g} {r.strategy:>10} {r.max_iterations:>7d} {r.mean_iterations:>8.3f} "
                         f"{100 * r.accuracy:>8.2f}%")
            rows.append([_fmt(angle), r.strategy, r.max_iterations, _fmt(r.mean_iterations), _fmt(r.accuracy)])
    print("\n".join(lines))
    _write_csv(out / "compare_init.csv", ["field_deg", "strategy", "max_iterations", "mean_iterations",
                                          "accuracy"], rows)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def shared(defaults: bool) -> argparse.ArgumentParser:
        # subcommand copies must not overwrite values given before the subcommand
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        p = _Parser(add_help=False)
        p.add_argument("--out", default=d("."), help="directory for all artifacts")
        p.add_argument("--seed", type=int, default=d(0))
        p.add_argument("--deterministic", action="store_true", default=d(False),
                       help="single-threaded, fixed-order reductions")
        return p

    parser = _Parser(prog="cohlens", description=__doc__.splitlines()[0], parents=[shared(True)])
    common = shared(False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.add_argument("--lens", required=True, help="prescription file")
        p.set_defaults(func=func)
        return p

    p = add("trace", cmd_trace, "per-ray CSV at the image plane")
    p.add_argument("--field", type=_floats, default=[0.0])
    p.add_argument("--pupil", type=int, default=17)

    p = add("spot", cmd_spot, "spot diagram CSV and merit report")
    p.add_argument("--field", type=_floats, default=[0.0])
    p.add_argument("--pupil", type=int, default=33)

    for name, func, text in (("psf", cmd_psf, "three-channel coherent PSF grids"),
                             ("mtf", cmd_mtf, "MTF curves from the coherent PSF")):
        p = add(name, func, text)
        p.add_argument("--field", type=float, default=0.0)
        p.add_argument("--pupil", type=int, default=PUPIL_SAMPLES)
        p.add_argument("--size", type=int, default=PSF_SIZE)
        p.add_argument("--pitch", type=float, default=PSF_PITCH * 1e3, help="grid pitch in µm")
        if name == "psf":
            p.add_argument("--azimuth", type=float, default=0.0)

    p = add("optimize", cmd_optimize, "optimize trainable lens parameters")
    p.add_argument("--spec", help="file with a [spec] block (defaults to the lens file's)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--psf-fields", type=_floats, default=None,
                   help="fields for the PSF sharpness merit hook")
    p.add_argument("--psf-weight", type=float, default=1.0)

    p = add("gradcheck", cmd_gradcheck, "adjoint vs finite-difference gradients")
    p.add_argument("--spec")
    p.add_argument("--tol", type=float, default=1e-5)

    p = add("render", cmd_render, "spatially varying blur of an image")
    p.add_argument("--image", required=True, help="PPM/PGM or raw float image")
    p.add_argument("--blocks", type=_blocks, default=(15, 20))
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--pupil", type=int, default=33)
    p.add_argument("--size", type=int, default=PSF_SIZE)
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)

    p = add("compare-init", cmd_compare_init, "initial-guess study on one surface")
    p.add_argument("--fields", type=_floats, default=[20.0, 30.0, 40.0])
    p.add_argument("--surface", type=int, default=None)
    p.add_argument("--rays", type=int, default=1000)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage().rstrip())
        if args.deterministic:
            os.environ["COHLENS_THREADS"] = "1"
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            args.func(args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (PrescriptionError, ImageError, OSError) as exc:
        print(f"cohlens: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"cohlens: numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
