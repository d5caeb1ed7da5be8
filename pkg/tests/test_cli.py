import csv
import json
import subprocess
import sys

import pytest

from collapse_lab.cli import main
from collapse_lab.runner import SCHEMA_VERSION, SUBCOMMANDS, resolve, run

FLAT = {"type": "flat_screw", "theta_rational": [1, 3]}


def _invoke(args):
    with pytest.raises(SystemExit) as exc:
        main(args)
    return exc.value.code


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_subcommand_set():
    assert set(SUBCOMMANDS) == {"inj-profile", "volume-growth", "curvature-decay", "pseudo-group",
                                "holonomy-decay", "gh-chart", "fibration", "diophantine"}


def test_pass_exit_code_and_outputs(tmp_path):
    cfg = _write(tmp_path, {"seed": 1, "model": FLAT, "experiments": {"inj-profile": {}}})
    out = tmp_path / "out"
    assert _invoke(["inj-profile", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "inj_profile.csv").open()))
    assert len(rows) == 10
    assert {float(r["inj"]) for r in rows} == {1.5}
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == SCHEMA_VERSION
    assert report["config"]["seed"] == 1


def test_fail_exit_code(tmp_path):
    cfg = _write(tmp_path, {"seed": 1, "model": FLAT,
                            "experiments": {"inj-profile": {"bounds": {"pinching_max": 0.5}}}})
    # the profile is constant, so pinching 1 exceeds a bound of 0.5
    assert _invoke(["inj-profile", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("cfg", [
    {"model": FLAT, "experiments": {"inj-profile": {}}},
    {"seed": -1, "model": FLAT, "experiments": {"inj-profile": {}}},
    {"seed": 1, "model": {"type": "klein"}, "experiments": {"inj-profile": {}}},
    {"seed": 1, "model": FLAT, "experiments": {"inj-profile": {"radius": [1, 2]}}},
    {"seed": 1, "model": FLAT, "experiments": {}, "extra": 3},
])
def test_config_errors_exit_3(tmp_path, cfg):
    assert _invoke(["inj-profile", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3


def test_usage_errors_exit_3(tmp_path):
    assert _invoke(["inj-profile", "--out", str(tmp_path)]) == 3
    assert _invoke(["no-such-command"]) == 3
    assert _invoke(["inj-profile", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _invoke(["inj-profile", "--config", str(bad), "--out", str(tmp_path)]) == 3


def test_seed_override_on_command_line(tmp_path):
    cfg = _write(tmp_path, {"model": FLAT, "experiments": {"inj-profile": {}}})
    assert _invoke(["inj-profile", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["config"]["seed"] == 5


def test_empty_grid_writes_header_only(tmp_path):
    raw = {"seed": 2, "model": FLAT, "experiments": {"inj-profile": {"radii": []}}}
    run("inj-profile", raw, out_dir=tmp_path)
    lines = (tmp_path / "inj_profile.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("r,")


def test_report_round_trip(tmp_path):
    raw = {"seed": 3, "model": FLAT, "experiments": {"diophantine": {}}}
    report = run("diophantine", raw, out_dir=tmp_path)
    text = (tmp_path / "report.json").read_text()
    data = json.loads(text)
    assert data["experiments"][0]["name"] == "diophantine"
    assert data["status"] == ("PASS" if report.passed else "FAIL")
    assert set(data["timestamp"]) == {"utc", "wall_time_s", "threads"}
    assert data == json.loads(json.dumps(report.to_json()))


def test_all_runs_listed_sections_only():
    configs = resolve("all", {"seed": 4, "model": FLAT, "experiments": {"gh-chart": {}, "diophantine": {}}})
    assert [c.name for c in configs] == ["gh-chart", "diophantine"]


def test_section_model_override():
    (cfg,) = resolve("pseudo-group", {"seed": 4, "model": FLAT, "experiments": {
        "pseudo-group": {"model": {"type": "flat_screw", "theta_rational": [1, 5]}}}})
    assert cfg.model["theta_rational"] == [1, 5]


def test_csv_bytes_identical_across_threads(tmp_path):
    raw = {"seed": 11, "model": FLAT, "experiments": {
        "volume-growth": {"samples": 120_000},
        "pseudo-group": {"fundamental_volume_samples": 120_000},
    }}
    outs = []
    for threads in (1, 4, 8):
        d = tmp_path / f"t{threads}"
        run("all", raw, threads=threads, out_dir=d)
        outs.append({p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))})
    assert outs[0] and outs[0] == outs[1] == outs[2]


def test_console_script_runs(tmp_path):
    cfg = _write(tmp_path, {"seed": 1, "model": FLAT, "experiments": {"diophantine": {}}})
    proc = subprocess.run([sys.executable, "-m", "collapse_lab.cli", "diophantine", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("status: PASS")
