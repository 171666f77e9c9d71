import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import brute_force_sdt
from umcf import io
from umcf.cli import main

SMALL_SPEC = {"dims": [12, 12, 12], "wt_axes": [5, 5, 4], "tc_axes": [3.5, 3.5, 3], "et_axes": [2, 2, 2],
              "feature_dim": 8, "blur": 0.8}
SUBCOMMANDS = ("fuse", "phantom", "sdt", "stats", "dice", "diag")


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("ph")
    (d / "spec.in.json").write_text(json.dumps(SMALL_SPEC))
    assert main(["phantom", "--spec", str(d / "spec.in.json"), "--outdir", str(d)]) == 0
    return d


def _lines(out):
    return [json.loads(line) for line in out.strip().splitlines()]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out


def test_unknown_flag_and_missing_args(capsys):
    assert main(["dice", "--a", "x", "--b", "y", "--bogus"]) == 1
    assert main(["sdt"]) == 1
    assert main([]) == 1


def test_phantom_outputs(phantom_dir):
    names = {p.name for p in phantom_dir.iterdir()}
    assert {"features.vol", "probmaps.vol", "masks.vol", "mask_ET.vol", "tokens.json", "spec.json"} <= names
    assert io.read_volume(phantom_dir / "features.vol").shape == (12, 12, 12, 8)


def test_fuse_defaults(phantom_dir, tmp_path, capsys):
    args = ["fuse", "--features", str(phantom_dir / "features.vol"), "--tokens", str(phantom_dir / "tokens.json"),
            "--probmaps", str(phantom_dir / "probmaps.vol"), "--out", str(tmp_path / "f.vol")]
    assert main(args) == 0
    records = _lines(capsys.readouterr().out)
    summary = records[-1]
    assert summary["event"] == "summary"
    r = summary["residuals"]
    assert len(r) == 3 and all(b <= a for a, b in zip(r, r[1:]))
    assert summary["violation_rate_after"] == 0.0
    assert (tmp_path / "f_probmaps.vol").exists()
    assert io.read_volume(tmp_path / "f.vol").shape == (12, 12, 12, 8)


def test_fuse_all_disabled(phantom_dir, tmp_path, capsys):
    args = ["fuse", "--features", str(phantom_dir / "features.vol"), "--tokens", str(phantom_dir / "tokens.json"),
            "--probmaps", str(phantom_dir / "probmaps.vol"), "--out", str(tmp_path / "f.vol"),
            "--disable-mV", "--disable-mT", "--disable-mS", "--disable-mTS"]
    assert main(args) == 1
    assert "all streams disabled" in capsys.readouterr().err


def test_fuse_shape_mismatch(phantom_dir, tmp_path, capsys):
    io.write_volume(tmp_path / "p.vol", np.full((6, 12, 12, 3), 0.5))
    args = ["fuse", "--features", str(phantom_dir / "features.vol"), "--tokens", str(phantom_dir / "tokens.json"),
            "--probmaps", str(tmp_path / "p.vol"), "--out", str(tmp_path / "f.vol")]
    assert main(args) == 1
    err = capsys.readouterr().err
    assert "(12, 12, 12)" in err and "(6, 12, 12)" in err


def test_fuse_bad_config(phantom_dir, tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"lambda": 1.5}')
    args = ["fuse", "--features", str(phantom_dir / "features.vol"), "--tokens", str(phantom_dir / "tokens.json"),
            "--probmaps", str(phantom_dir / "probmaps.vol"), "--config", str(tmp_path / "c.json")]
    assert main(args) == 1


def test_missing_file_is_io_error(tmp_path, capsys):
    assert main(["stats", "--probmaps", str(tmp_path / "nope.vol")]) == 2


def test_bad_magic_is_format_error(tmp_path, capsys):
    (tmp_path / "bad.vol").write_bytes(b"BADMAGIC" + b"\0" * 64)
    assert main(["sdt", "--mask", str(tmp_path / "bad.vol"), "--out", str(tmp_path / "o.vol")]) == 2
    assert "offset 0" in capsys.readouterr().err


def test_dice_identical(phantom_dir, capsys):
    m = str(phantom_dir / "mask_WT.vol")
    assert main(["dice", "--a", m, "--b", m]) == 0
    assert capsys.readouterr().out.strip() == "1.0"
    m = str(phantom_dir / "masks.vol")
    assert main(["dice", "--a", m, "--b", m]) == 0
    assert _lines(capsys.readouterr().out) == [{"ET": 1.0, "TC": 1.0, "WT": 1.0}]


def test_sdt_single_voxel(tmp_path, capsys):
    m = np.zeros((3, 3, 3))
    m[1, 1, 1] = 1.0
    io.write_volume(tmp_path / "m.vol", m)
    assert main(["sdt", "--mask", str(tmp_path / "m.vol"), "--out", str(tmp_path / "s.vol")]) == 0
    sdt = io.read_volume(tmp_path / "s.vol")
    np.testing.assert_allclose(sdt, brute_force_sdt(m > 0.5), atol=1e-6)
    assert sdt[0, 0, 0] == pytest.approx(-math.sqrt(3), abs=1e-6)


def test_stats_zero_mass(tmp_path, capsys):
    io.write_volume(tmp_path / "p.vol", np.zeros((4, 4, 4, 3)))
    assert main(["stats", "--probmaps", str(tmp_path / "p.vol")]) == 0
    records = _lines(capsys.readouterr().out)
    assert [r["class"] for r in records] == ["ET", "TC", "WT"]
    assert all(r["degenerate"] for r in records)


def test_stats_phantom(phantom_dir, capsys):
    assert main(["stats", "--probmaps", str(phantom_dir / "probmaps.vol")]) == 0
    records = _lines(capsys.readouterr().out)
    assert all(not r["degenerate"] and len(r["eigenvalues"]) == 3 for r in records)


def test_diag(phantom_dir, tmp_path, capsys):
    args = ["diag", "--probmaps", str(phantom_dir / "probmaps.vol"), "--features", str(phantom_dir / "features.vol"),
            "--tokens", str(phantom_dir / "tokens.json"), "--out", str(tmp_path / "u.vol")]
    assert main(args) == 0
    records = _lines(capsys.readouterr().out)
    assert [r["field"] for r in records] == ["u_V", "u_T", "u_S", "u_TS"]
    u = io.read_volume(tmp_path / "u.vol")
    assert u.shape == (12, 12, 12, 4) and u.min() >= 0 and u.max() <= 1
    assert main(["diag", "--probmaps", str(phantom_dir / "probmaps.vol"), "--features", "x"]) == 1


def test_bad_thread_count(phantom_dir, monkeypatch, capsys):
    monkeypatch.setenv("UMCF_THREADS", "zero")
    assert main(["stats", "--probmaps", str(phantom_dir / "probmaps.vol")]) == 1


def test_module_entry_point(phantom_dir):
    proc = subprocess.run([sys.executable, "-m", "umcf", "stats", "--probmaps", str(phantom_dir / "probmaps.vol")],
                          capture_output=True, text=True, env={**os.environ, "UMCF_THREADS": "2"})
    assert proc.returncode == 0
    assert len(proc.stdout.strip().splitlines()) == 3
