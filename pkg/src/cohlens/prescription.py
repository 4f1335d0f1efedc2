"""Plain-text lens prescriptions.

A prescription is a sequence of ``[section]`` blocks holding ``key = value``
lines; ``#`` starts a comment.  Example::

    [system]
    name = singlet
    wavelengths = 486.1, 587.6, 656.3
    fields = 0, 5, 10
    image_height = 6

    [glass N-BK7]
    model = sellmeier
    coefficients = 1.03961212, 0.231792344, 1.01046945, 0.00600069867, 0.0200179144, 103.560653
    range = 300, 2500

    [surface 0]
    c = 0.02
    d = 4
    semi_aperture = 6
    material = N-BK7
    stop = true
    trainable = c, d

Optional ``[spec]`` carries design targets and ``[fixture]`` carries
declared values (surface count, total track, EFFL) for self-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
import re

from .geometry import EVEN_ASPHERE, N_ASPHERE, PARAM_KINDS, STANDARD, Surface
from .losses import DesignSpec
from .materials import AIR, CATALOG, DispersionModel
from .system import LensSystem


class PrescriptionError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


SYSTEM_KEYS = {"name", "wavelengths", "reference", "fields", "image_height", "sensor_pitch",
               "object_distance", "stop"}
SURFACE_KEYS = {"kind", "c", "d", "k", "semi_aperture", "material", "stop", "trainable"} | {
    f"a{i}" for i in range(1, N_ASPHERE + 1)
}
GLASS_KEYS = {"model", "coefficients", "range"}
SPEC_KEYS = {"ttl_max", "fov", "image_height", "eps_gap", "eps_dist"}
FIXTURE_KEYS = {"surfaces", "total_track", "effl"}

_SECTION = re.compile(r"^\[\s*([A-Za-z]+)(?:\s+([^\]\s]+))?\s*\]$")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass
class Prescription:
    system: LensSystem
    spec: DesignSpec | None = None
    declared: dict = field(default_factory=dict)


@dataclass
class _Block:
    kind: str
    label: str | None
    line: int
    entries: dict = field(default_factory=dict)  # key -> (value, line, column)


def _tokenize(text: str) -> list[_Block]:
    blocks: list[_Block] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        indent = len(line) - len(line.lstrip())
        if stripped.startswith("["):
            m = _SECTION.match(stripped)
            if not m:
                raise PrescriptionError(f"malformed section header {stripped!r}", lineno, indent + 1)
            blocks.append(_Block(m.group(1).lower(), m.group(2), lineno))
            continue
        if "=" not in stripped:
            raise PrescriptionError("expected 'key = value'", lineno, indent + 1)
        if not blocks:
            raise PrescriptionError("entry before any section header", lineno, indent + 1)
        key, val = stripped.split("=", 1)
        key = key.strip()
        if not _KEY.match(key):
            raise PrescriptionError(f"invalid key {key!r}", lineno, indent + 1)
        after = line.index("=") + 1
        col = after + len(line[after:]) - len(line[after:].lstrip()) + 1
        if key in blocks[-1].entries:
            raise PrescriptionError(f"duplicate key {key!r}", lineno, indent + 1)
        blocks[-1].entries[key] = (val.strip(), lineno, col)
    return blocks


def _float(entry) -> float:
    val, line, col = entry
    try:
        return float(val)
    except ValueError:
        raise PrescriptionError(f"expected a number, got {val!r}", line, col) from None


def _int(entry) -> int:
    val, line, col = entry
    try:
        return int(val)
    except ValueError:
        raise PrescriptionError(f"expected an integer, got {val!r}", line, col) from None


def _floats(entry) -> tuple[float, ...]:
    val, line, col = entry
    try:
        return tuple(float(v) for v in val.split(",") if v.strip())
    except ValueError:
        raise PrescriptionError(f"expected a comma-separated number list, got {val!r}", line, col) from None


def _bool(entry) -> bool:
    val, line, col = entry
    low = val.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise PrescriptionError(f"expected true/false, got {val!r}", line, col)


def _check_keys(block: _Block, allowed: set):
    for key, (_, line, _) in block.entries.items():
        if key not in allowed:
            raise PrescriptionError(f"unknown key {key!r} in [{block.kind}]", line, 1)


def load_prescription(text: str) -> Prescription:
    """Parse a prescription document including optional spec and fixture blocks."""
    blocks = _tokenize(text)
    systems = [b for b in blocks if b.kind == "system"]
    if len(systems) != 1:
        raise PrescriptionError(f"exactly one [system] block required, found {len(systems)}")
    glasses: dict[str, DispersionModel] = {}
    surfaces: dict[int, _Block] = {}
    spec_block = fixture_block = None
    for b in blocks:
        if b.kind == "system":
            _check_keys(b, SYSTEM_KEYS)
        elif b.kind == "glass":
            _check_keys(b, GLASS_KEYS)
            if not b.label:
                raise PrescriptionError("[glass] needs a name", b.line)
            if b.label in glasses:
                raise PrescriptionError(f"glass {b.label!r} defined twice", b.line)
            glasses[b.label] = _glass(b)
        elif b.kind == "surface":
            _check_keys(b, SURFACE_KEYS)
            try:
                idx = int(b.label)
            except (TypeError, ValueError):
                raise PrescriptionError("[surface N] needs an integer index", b.line) from None
            if idx in surfaces:
                raise PrescriptionError(f"surface {idx} defined twice", b.line)
            surfaces[idx] = b
        elif b.kind == "spec":
            _check_keys(b, SPEC_KEYS)
            spec_block = b
        elif b.kind == "fixture":
            _check_keys(b, FIXTURE_KEYS)
            fixture_block = b
        else:
            raise PrescriptionError(f"unknown section [{b.kind}]", b.line, 1)
    if not surfaces:
        raise PrescriptionError("no [surface] blocks")
    if sorted(surfaces) != list(range(len(surfaces))):
        raise PrescriptionError(f"surface indices must be 0..{len(surfaces) - 1}, got {sorted(surfaces)}")

    sysb = systems[0]
    stop_flags = [i for i in sorted(surfaces) if "stop" in surfaces[i].entries and _bool(surfaces[i].entries["stop"])]
    if "stop" in sysb.entries:
        s = _int(sysb.entries["stop"])
        if s not in surfaces:
            raise PrescriptionError(f"stop surface {s} does not exist", sysb.entries["stop"][1])
        if s not in stop_flags:
            stop_flags.append(s)
    if len(stop_flags) > 1:
        names = ", ".join(str(s) for s in sorted(stop_flags))
        raise PrescriptionError(f"more than one stop: surfaces {names}")
    if not stop_flags:
        raise PrescriptionError("no stop surface flagged")

    surf_list = [_surface(surfaces[i], i, glasses, i in stop_flags) for i in range(len(surfaces))]
    e = sysb.entries
    kwargs = {"surfaces": tuple(surf_list)}
    if "name" in e:
        kwargs["name"] = e["name"][0]
    if "wavelengths" in e:
        kwargs["wavelengths"] = _floats(e["wavelengths"])
    if "reference" in e:
        kwargs["reference"] = _int(e["reference"])
    if "fields" in e:
        kwargs["fields"] = _floats(e["fields"])
    for key in ("image_height", "sensor_pitch", "object_distance"):
        if key in e:
            kwargs[key] = _float(e[key])
    try:
        system = LensSystem(**kwargs)
    except (ValueError, NotImplementedError) as exc:
        raise PrescriptionError(str(exc), sysb.line) from None

    spec = None
    if spec_block is not None:
        vals = {k: _float(v) for k, v in spec_block.entries.items()}
        try:
            spec = DesignSpec(**vals)
        except (TypeError, ValueError) as exc:
            raise PrescriptionError(f"invalid [spec]: {exc}", spec_block.line) from None
    declared = {}
    if fixture_block is not None:
        for k, v in fixture_block.entries.items():
            declared[k] = _int(v) if k == "surfaces" else _float(v)
    return Prescription(system, spec, declared)


def parse_prescription(text: str) -> LensSystem:
    return load_prescription(text).system


def read_prescription(path) -> Prescription:
    with open(path, encoding="utf-8") as fh:
        return load_prescription(fh.read())


def _glass(b: _Block) -> DispersionModel:
    e = b.entries
    if "model" not in e or "coefficients" not in e:
        raise PrescriptionError(f"glass {b.label!r} needs 'model' and 'coefficients'", b.line)
    rng = _floats(e["range"]) if "range" in e else (0.0, math.inf)
    if len(rng) != 2:
        raise PrescriptionError("range needs two values", e["range"][1], e["range"][2])
    try:
        return DispersionModel(e["model"][0].lower(), _floats(e["coefficients"]), rng, b.label)
    except ValueError as exc:
        raise PrescriptionError(str(exc), e["model"][1]) from None


def _material(entry, glasses) -> DispersionModel:
    name, line, col = entry
    if name.lower() == "air":
        return AIR
    if name in glasses:
        return glasses[name]
    if name in CATALOG:
        return CATALOG[name]
    raise PrescriptionError(f"unknown material {name!r}", line, col)


def _surface(b: _Block, idx: int, glasses, stop: bool) -> Surface:
    e = b.entries
    kind = e["kind"][0] if "kind" in e else None
    asph = [_float(e[f"a{i}"]) if f"a{i}" in e else 0.0 for i in range(1, N_ASPHERE + 1)]
    if kind is None:
        kind = EVEN_ASPHERE if any(f"a{i}" in e for i in range(1, N_ASPHERE + 1)) else STANDARD
    trainable = frozenset()
    if "trainable" in e:
        val, line, col = e["trainable"]
        names = [t.strip() for t in val.split(",") if t.strip()]
        bad = [n for n in names if n not in PARAM_KINDS]
        if bad:
            raise PrescriptionError(f"surface {idx}: unknown trainable parameter(s) {bad}", line, col)
        trainable = frozenset(names)
    try:
        return Surface(
            curvature=_float(e["c"]) if "c" in e else 0.0,
            thickness=_float(e["d"]) if "d" in e else 0.0,
            semi_aperture=_float(e["semi_aperture"]) if "semi_aperture" in e else 1.0,
            conic=_float(e["k"]) if "k" in e else 0.0,
            aspheric=tuple(asph),
            material=_material(e["material"], glasses) if "material" in e else AIR,
            stop=stop,
            kind=kind,
            trainable=trainable,
        )
    except PrescriptionError:
        raise
    except ValueError as exc:
        raise PrescriptionError(f"surface {idx}: {exc}", b.line) from None


def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _nums(xs) -> str:
    return ", ".join(_num(x) for x in xs)


def emit_prescription(system: LensSystem, spec: DesignSpec | None = None, declared: dict | None = None) -> str:
    """Serialize to the text format; floats are written with ``repr`` so parsing round-trips."""
    lines = ["[system]"]
    if system.name:
        lines.append(f"name = {system.name}")
    lines += [
        f"wavelengths = {_nums(system.wavelengths)}",
        f"reference = {system.reference}",
        f"fields = {_nums(system.fields)}",
        f"image_height = {_num(system.image_height)}",
        f"sensor_pitch = {_num(system.sensor_pitch)}",
        f"object_distance = {_num(system.object_distance)}",
    ]
    names: dict[DispersionModel, str] = {}
    for s in system.surfaces:
        m = s.material
        if m.is_air or m in names:
            continue
        names[m] = m.name or f"glass{len(names)}"
        lines += ["", f"[glass {names[m]}]", f"model = {m.kind}", f"coefficients = {_nums(m.coefficients)}"]
        if m.wavelength_range != (0.0, math.inf):
            lines.append(f"range = {_nums(m.wavelength_range)}")
    for j, s in enumerate(system.surfaces):
        lines += ["", f"[surface {j}]", f"kind = {s.kind}", f"c = {_num(s.curvature)}",
                  f"d = {_num(s.thickness)}", f"k = {_num(s.conic)}"]
        if s.kind == EVEN_ASPHERE:
            lines += [f"a{i} = {_num(a)}" for i, a in enumerate(s.aspheric, start=1)]
        lines.append(f"semi_aperture = {_num(s.semi_aperture)}")
        lines.append(f"material = {'air' if s.material.is_air else names[s.material]}")
        if s.stop:
            lines.append("stop = true")
        if s.trainable:
            lines.append("trainable = " + ", ".join(k for k in PARAM_KINDS if k in s.trainable))
    if spec is not None:
        lines += ["", "[spec]"] + [
            f"{k} = {_num(getattr(spec, k))}" for k in ("ttl_max", "fov", "image_height", "eps_gap", "eps_dist")
        ]
    if declared:
        lines += ["", "[fixture]"] + [f"{k} = {v!r}" for k, v in declared.items()]
    return "\n".join(lines) + "\n"
