from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from icet.cli import EXIT_IOERR, EXIT_OK, EXIT_UNREGISTRABLE, EXIT_USAGE, main
from icet.pointcloud_io import PointCloud, save_scan


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def tunnel_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("tunnel")
    assert main(["scene-gen", "tunnel", "--seed", "7", "--out", str(d)]) == EXIT_OK
    return d


def test_scene_gen_deterministic(tmp_path, tunnel_pair):
    assert main(["scene-gen", "tunnel", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    assert files(tmp_path) == files(tunnel_pair)
    assert set(files(tmp_path)) == {"reference.bin", "new.bin", "manifest.json"}


def test_scene_gen_ply(tmp_path, capsys):
    code, _, _ = run(capsys, "scene-gen", "open_field", "--format", "ply_ascii", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert (tmp_path / "reference.ply").read_text().startswith("ply\n")


def test_match_self(capsys, tunnel_pair):
    ref = str(tunnel_pair / "reference.bin")
    code, out, _ = run(capsys, "match", ref, ref)
    assert code == EXIT_OK
    report = json.loads(out)
    assert max(abs(v) for v in report["estimate"].values()) < 1e-9
    assert report["algo"] == "icet"


def test_match_tunnel_icet_flags_y(capsys, tunnel_pair):
    code, out, _ = run(capsys, "match", str(tunnel_pair / "reference.bin"),
                       str(tunnel_pair / "new.bin"), "--algo", "icet")
    assert code == EXIT_OK
    assert json.loads(out)["dnu_states"] == ["y"]


@pytest.mark.xfail(strict=True, reason="the condition screen also runs without refinement and "
                   "removes the along-track direction; see the decisions notes")
def test_match_tunnel_ndt_has_no_flags(capsys, tunnel_pair):
    _, out, _ = run(capsys, "match", str(tunnel_pair / "reference.bin"),
                    str(tunnel_pair / "new.bin"), "--algo", "ndt")
    assert json.loads(out)["dnu_states"] == []


def test_corrupt_file(tmp_path, capsys, tunnel_pair):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x01" * 18)
    code, _, err = run(capsys, "match", str(tunnel_pair / "reference.bin"), str(bad))
    assert code == EXIT_IOERR
    assert "bad.bin" in err


def test_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "match", str(tmp_path / "a.bin"), str(tmp_path / "b.bin"))
    assert code == EXIT_IOERR
    assert "a.bin" in err


def test_unregistrable(tmp_path, capsys):
    sparse = tmp_path / "few.bin"
    save_scan(PointCloud(np.random.default_rng(0).normal(10, 1, (20, 3))), sparse)
    code, _, _ = run(capsys, "match", str(sparse), str(sparse))
    assert code == EXIT_UNREGISTRABLE


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["montecarlo", "cave", "--out", "x"],
    ["montecarlo", "tunnel", "--trials", "0", "--out", "x"],
    ["sweep", "tunnel", "--resolutions", "4,abc", "--out", "x"],
    ["match", "a.bin"],
    ["match", "a.bin", "b.bin", "--initial-guess", "1,2"],
])
def test_usage_errors(capsys, argv):
    code, _, _ = run(capsys, *argv)
    assert code == EXIT_USAGE


def test_sweep_out_of_range(tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "tunnel", "--resolutions", "0.5", "--trials", "1",
                     "--out", str(tmp_path))
    assert code == EXIT_USAGE


def test_montecarlo_rerun_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, _, _ = run(capsys, "montecarlo", "t_intersection", "--trials", "2", "--seed", "3",
                     "--out", str(a))
    assert code == EXIT_OK
    summary = json.loads((a / "summary.json").read_text())
    assert summary["n_trials"] == 2
    assert summary["table"]["columns"] == ["x", "y", "z", "phi", "theta", "psi"]
    assert len((a / "trials.csv").read_text().splitlines()) == 3
    code, _, _ = run(capsys, "rerun", str(a / "manifest.json"), "--out", str(b))
    assert code == EXIT_OK
    assert files(a) == files(b)


def test_sweep_rows(tmp_path, capsys):
    code, _, _ = run(capsys, "sweep", "t_intersection", "--trials", "1",
                     "--resolutions", "4,5", "--out", str(tmp_path))
    assert code == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("resolution_deg,")


def test_odometry(tmp_path, capsys, tunnel_pair):
    scans = [str(tunnel_pair / "reference.bin")] * 2
    code, _, _ = run(capsys, "odometry", *scans, "--map", "--out", str(tmp_path))
    assert code == EXIT_OK
    rows = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["outputs"] == ["manifest.json", "map.ply", "trajectory.csv"]


def test_bad_manifest(tmp_path, capsys):
    m = tmp_path / "manifest.json"
    m.write_text("{}")
    code, _, _ = run(capsys, "rerun", str(m), "--out", str(tmp_path / "o"))
    assert code == EXIT_IOERR


def option_help(text: str) -> dict[str, str]:
    """Help text per long option, continuation lines joined."""
    entries: dict[str, str] = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if line.startswith("  -"):
            current = stripped.split()[0].rstrip(",")
            entries[current] = stripped
        elif current and line.startswith("      "):
            entries[current] += " " + stripped
        else:
            current = None
    return entries


def test_help_lists_defaults():
    out = subprocess.run([sys.executable, "-m", "icet", "montecarlo", "--help"],
                         capture_output=True, text=True, check=True).stdout
    entries = option_help(out)
    for flag, default in (("--grid-res-deg", "4.0"), ("--min-points", "50"), ("--t-cond", "50000.0"),
                          ("--t-mod", "0.05"), ("--max-iterations", "30"), ("--trials", "100"),
                          ("--algo", "icet"), ("--noise", "0.002")):
        assert f"(default: {default})" in entries[flag]
