import subprocess
import sys

import numpy as np
import pytest

from emic.cli import run
from emic.geometry import write_ppm


def _kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_ppm(d / "img.ppm", np.random.default_rng(0).random((48, 64, 3)))
    assert run(["train", "--steps", "2", "--batch", "2", "--seed", "1", "--output", str(d / "m.empw")]) == 0
    assert run(["maskgen", "--ratio", "0.5", "--seed", "3", "--width", "64", "--height", "48",
                "--output", str(d / "mask.pgm")]) == 0
    return d


def test_encode_decode_roundtrip(workdir, capsys):
    d = workdir
    capsys.readouterr()
    assert run(["encode", "--input", str(d / "img.ppm"), "--mask", str(d / "mask.pgm"), "--model", str(d / "m.empw"),
                "--lambda-index", "1", "--output", str(d / "o.emic")]) == 0
    enc = _kv(capsys.readouterr().out)
    assert int(enc["bytes"]) == (d / "o.emic").stat().st_size
    assert run(["decode", "--input", str(d / "o.emic"), "--model", str(d / "m.empw"),
                "--output", str(d / "rec.ppm")]) == 0
    assert (d / "rec.ppm").exists()
    capsys.readouterr()
    assert run(["roundtrip", "--input", str(d / "img.ppm"), "--mask", str(d / "mask.pgm"),
                "--model", str(d / "m.empw")]) == 0
    out = capsys.readouterr().out
    assert "BITEXACT: yes" in out
    kv = _kv(out)
    assert float(kv["bpp"]) > 0 and "psnr_masked" in kv


def test_encode_is_deterministic(workdir):
    d = workdir
    args = ["--input", str(d / "img.ppm"), "--mask", str(d / "mask.pgm"), "--model", str(d / "m.empw")]
    run(["encode", *args, "--output", str(d / "a.emic")])
    run(["encode", *args, "--output", str(d / "b.emic")])
    assert (d / "a.emic").read_bytes() == (d / "b.emic").read_bytes()


def test_usage_errors(capsys):
    assert run(["encode", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["frobnicate"]) == 1
    assert run([]) == 1
    assert run(["maskgen", "--ratio", "1.5", "--output", "x.pgm"]) == 1
    assert run(["encode", "--input", "a", "--model", "b", "--output", "c", "--lambda-index", "9"]) in (1, 2)


def test_missing_file_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.emic"
    assert run(["decode", "--input", str(missing), "--model", str(missing), "--output", str(tmp_path / "r.ppm")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_corrupt_bitstream_is_a_data_error(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.emic"
    bad.write_bytes(b"EMIC\x01garbage")
    assert run(["decode", "--input", str(bad), "--model", str(workdir / "m.empw"), "--output", str(tmp_path / "r.ppm")]) == 2
    assert "bad.emic" in capsys.readouterr().err


def test_flops_report(capsys):
    assert run(["flops", "--visible-ratio", "0.4", "--width", "256", "--height", "256"]) == 0
    kv = _kv(capsys.readouterr().out)
    assert int(kv["total_flops"]) == sum(int(kv[f"category.{c}"]) for c in ("linear", "attention", "elementwise"))
    assert run(["flops"]) == 1


def test_maskgen_is_deterministic(tmp_path):
    run(["maskgen", "--ratio", "0.3", "--seed", "9", "--output", str(tmp_path / "a.pgm")])
    run(["maskgen", "--ratio", "0.3", "--seed", "9", "--output", str(tmp_path / "b.pgm")])
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_selftest_and_threads(monkeypatch, capsys):
    monkeypatch.setenv("EMIC_THREADS", "2")
    assert run(["selftest"]) == 0
    assert "selftest=pass" in capsys.readouterr().out
    monkeypatch.setenv("EMIC_THREADS", "zero")
    assert run(["selftest"]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "emic", "maskgen", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--ratio" in out.stdout
