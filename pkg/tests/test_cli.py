import csv
import subprocess
import sys

import numpy as np
import pytest

from cohlens.cli import dispatch
from cohlens.imaging import read_pnm, write_pnm

from conftest import fixture_path


def lens(name):
    return str(fixture_path(name))


def run(tmp_path, *argv):
    return dispatch(["--out", str(tmp_path), *argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_trace_csv(tmp_path):
    assert run(tmp_path, "trace", "--lens", lens("singlet"), "--field", "0,5", "--pupil", "5") == 0
    rows = read_rows(tmp_path / "trace.csv")
    assert {float(r["field_deg"]) for r in rows} == {0.0, 5.0}
    assert {float(r["wavelength_nm"]) for r in rows} == {486.1, 587.6, 656.3}
    assert all(r["failure"] == "none" for r in rows if r["valid"] == "1")


def test_spot_report_includes_losses(tmp_path):
    assert run(tmp_path, "spot", "--lens", lens("singlet"), "--field", "0,10", "--pupil", "9") == 0
    report = (tmp_path / "spot_report.txt").read_text()
    assert "spot_rms_mm[0]" in report and "spot_rms_mm[10]" in report
    assert "L_total" in report
    assert read_rows(tmp_path / "spot.csv")


def test_psf_writes_three_channels_and_metadata(tmp_path):
    assert run(tmp_path, "psf", "--lens", lens("singlet"), "--pupil", "9", "--size", "15") == 0
    for lam in ("486.1", "587.6", "656.3"):
        grid = np.loadtxt(tmp_path / f"psf_{lam}nm.csv", delimiter=",", skiprows=1)
        assert grid.shape == (15, 15)
        assert grid.sum() == pytest.approx(1.0, rel=1e-9)
        img = read_pnm(tmp_path / f"psf_{lam}nm.pgm")
        assert img.shape == (15, 15)
    meta = (tmp_path / "psf_meta.txt").read_text()
    for key in ("center_x_mm", "pitch_mm", "wavelengths_nm", "normalization"):
        assert key in meta


def test_mtf_csv(tmp_path):
    assert run(tmp_path, "mtf", "--lens", lens("singlet"), "--pupil", "9", "--size", "15") == 0
    rows = read_rows(tmp_path / "mtf.csv")
    dc = [float(r["modulation"]) for r in rows if float(r["frequency_cyc_per_mm"]) == 0.0]
    assert dc and np.allclose(dc, 1.0)


def test_gradcheck_reports_small_error(tmp_path, capsys):
    assert run(tmp_path, "gradcheck", "--lens", lens("singlet")) == 0
    out = capsys.readouterr().out
    last = out.strip().splitlines()[-1]
    assert last.startswith("max relative error:")
    assert float(last.split(":")[1]) < 1e-5
    assert (tmp_path / "gradcheck.txt").read_text() == out


def test_gradcheck_tolerance_failure_exits_2(tmp_path):
    assert run(tmp_path, "gradcheck", "--lens", lens("singlet"), "--tol", "0") == 2


def test_compare_init(tmp_path, capsys):
    code = run(tmp_path, "compare-init", "--lens", lens("high_asphere"), "--fields", "20,40", "--rays", "200")
    assert code == 0
    rows = read_rows(tmp_path / "compare_init.csv")
    ref = [r for r in rows if r["strategy"] == "reference"]
    assert len(ref) == 2
    assert all(int(r["max_iterations"]) <= 6 and float(r["accuracy"]) == 1.0 for r in ref)
    assert "surface" in capsys.readouterr().out


def test_optimize_writes_trajectory_and_lens(tmp_path):
    assert run(tmp_path, "optimize", "--lens", lens("singlet"), "--steps", "2") == 0
    lines = (tmp_path / "trajectory.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert "[spec]" in (tmp_path / "optimized.lens").read_text()


def test_render(tmp_path):
    rng = np.random.default_rng(1)
    scene = tmp_path / "scene.ppm"
    write_pnm(scene, rng.random((20, 30, 3)), bits=8)
    args = ["render", "--lens", lens("singlet"), "--image", str(scene), "--blocks", "2x3",
            "--pupil", "9", "--size", "7", "--noise", "0"]
    assert run(tmp_path, *args) == 0
    assert read_pnm(tmp_path / "degraded.ppm").shape == (20, 30, 3)


def test_unknown_subcommand_exits_1(tmp_path, capsys):
    assert run(tmp_path, "frobnicate") == 1
    assert "error" in capsys.readouterr().err


def test_no_subcommand_exits_1(tmp_path):
    assert run(tmp_path) == 1


def test_missing_file_exits_1(tmp_path):
    assert run(tmp_path, "trace", "--lens", str(tmp_path / "missing.lens")) == 1


def test_malformed_prescription_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.lens"
    bad.write_text("[system]\nbogus = 1\n")
    assert run(tmp_path, "trace", "--lens", str(bad)) == 1
    assert "line 2" in capsys.readouterr().err


def test_optimize_without_spec_exits_1(tmp_path):
    assert run(tmp_path, "optimize", "--lens", lens("ideal"), "--steps", "1") == 1


def test_fully_vignetted_field_exits_2(tmp_path, capsys):
    assert run(tmp_path, "psf", "--lens", lens("vignetted"), "--field", "40", "--pupil", "9") == 2
    assert "numerical failure" in capsys.readouterr().err


def test_global_flags_before_subcommand(tmp_path):
    out = tmp_path / "nested"
    assert dispatch(["--out", str(out), "--seed", "3", "trace", "--lens", lens("singlet"), "--pupil", "3"]) == 0
    assert (out / "trace.csv").exists()


@pytest.mark.parametrize(
    "argv,artifacts",
    [
        (["trace", "--pupil", "7", "--field", "0,10"], ["trace.csv"]),
        (["psf", "--pupil", "9", "--size", "15", "--field", "10"],
         ["psf_486.1nm.csv", "psf_587.6nm.csv", "psf_656.3nm.csv", "psf_meta.txt"]),
        (["optimize", "--steps", "3"], ["trajectory.jsonl", "optimized.lens"]),
    ],
)
def test_deterministic_runs_are_byte_identical(tmp_path, monkeypatch, argv, artifacts):
    monkeypatch.delenv("COHLENS_THREADS", raising=False)  # restored after the test
    outputs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert dispatch(["--out", str(out), "--seed", "7", "--deterministic", argv[0],
                         "--lens", lens("singlet"), *argv[1:]]) == 0
        outputs.append([(out / a).read_bytes() for a in artifacts])
    assert outputs[0] == outputs[1]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cohlens.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "compare-init" in proc.stdout
