import math

import pytest

from cohlens import emit_prescription, load_prescription, paraxial_effl, parse_prescription
from cohlens.geometry import EVEN_ASPHERE
from cohlens.prescription import PrescriptionError

from conftest import fixture_path, load

FIXTURES = ["singlet", "doublet", "double_gauss", "high_asphere", "ideal", "vignetted"]

SINGLET = """
[system]
wavelengths = 486.1, 587.6, 656.3
fields = 0

[surface 0]
c = 0.02
d = 4
semi_aperture = 6
material = N-BK7
stop = true

[surface 1]
c = -0.02
d = 45
semi_aperture = 6
"""


@pytest.mark.parametrize("name", FIXTURES)
def test_round_trip_is_identity(name):
    p = load(name)
    text = emit_prescription(p.system, p.spec, p.declared)
    q = load_prescription(text)
    assert q.system == p.system
    assert q.spec == p.spec
    assert q.declared == p.declared
    assert emit_prescription(q.system, q.spec, q.declared) == text


def test_minimal_singlet_parses():
    system = parse_prescription(SINGLET)
    assert len(system.surfaces) == 2
    assert system.stop_index == 0
    assert system.surfaces[0].material.name == "N-BK7"
    assert system.surfaces[1].material.is_air
    f = paraxial_effl(system)
    # thin-lens estimate 1/((n-1)*0.04) with n ~ 1.517
    assert 45.0 < f < 51.0


def test_comments_and_blank_lines_ignored():
    text = "# header comment\n" + SINGLET.replace("d = 4\n", "d = 4   # center thickness\n")
    assert parse_prescription(text) == parse_prescription(SINGLET)


def test_double_gauss_declared_values():
    p = load("double_gauss")
    assert len(p.system.surfaces) == p.declared["surfaces"] == 11
    assert p.system.total_track == pytest.approx(p.declared["total_track"], abs=1e-5)
    assert paraxial_effl(p.system) == pytest.approx(p.declared["effl"], rel=1e-3)


def test_asphere_fixture_has_even_asphere():
    p = load("high_asphere")
    assert any(s.kind == EVEN_ASPHERE for s in p.system.surfaces)


def test_unknown_key_reports_line():
    text = SINGLET.replace("d = 45", "thickness = 45")
    with pytest.raises(PrescriptionError) as info:
        parse_prescription(text)
    expected_line = text.splitlines().index("thickness = 45") + 1
    assert info.value.line == expected_line
    assert "thickness" in str(info.value)
    assert f"line {expected_line}" in str(info.value)


def test_duplicate_key():
    text = SINGLET.replace("c = 0.02\n", "c = 0.02\nc = 0.03\n")
    with pytest.raises(PrescriptionError, match="duplicate key 'c'"):
        parse_prescription(text)


def test_two_stops_name_both_surfaces():
    text = SINGLET.rstrip() + "\nstop = true\n"
    with pytest.raises(PrescriptionError, match="more than one stop: surfaces 0, 1"):
        parse_prescription(text)


def test_no_stop():
    with pytest.raises(PrescriptionError, match="no stop"):
        parse_prescription(SINGLET.replace("stop = true\n", ""))


@pytest.mark.parametrize(
    "old,new,fragment",
    [
        ("c = 0.02", "c = abc", "expected a number"),
        ("material = N-BK7", "material = UNOBTAINIUM", "UNOBTAINIUM"),
        ("[surface 1]", "[surface 2]", "surface indices"),
        ("[surface 1]", "[surface one]", "integer index"),
        ("[system]", "[sistem]", "[system]"),
        ("d = 4\n", "d 4\n", "key = value"),
    ],
)
def test_malformed_documents(old, new, fragment):
    with pytest.raises(PrescriptionError) as info:
        parse_prescription(SINGLET.replace(old, new, 1))
    assert fragment in str(info.value)


def test_number_error_has_column():
    text = SINGLET.replace("c = 0.02", "c = abc")
    with pytest.raises(PrescriptionError) as info:
        parse_prescription(text)
    assert info.value.column == 5


def test_infinite_object_distance_round_trips():
    system = parse_prescription(SINGLET)
    assert math.isinf(system.object_distance)
    assert "object_distance = inf" in emit_prescription(system)


def test_fixture_files_exist():
    for name in FIXTURES:
        assert fixture_path(name).is_file()
