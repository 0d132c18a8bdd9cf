import hashlib
import json
import shutil
import subprocess

import pytest

from poissonmfg import cli

FAST = {"N": 200, "K_steps": 40, "iterations": 8, "model": {"lq": {}},
        "audit": {"n_spikes": 3, "n_paths": 100}, "monotone": {"samples": 500}}


def _write(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _errors(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _run_dir(out, sub):
    dirs = list(out.glob(f"{sub}-*"))
    assert len(dirs) == 1
    return dirs[0]


def test_invalid_lq_exits_2_with_messages(tmp_path, capsys):
    cfg = _write(tmp_path, {"seed": 1, "model": {"lq": {"b": 0.5}}})
    assert cli.main(["check-monotone", cfg, "--out", str(tmp_path / "o")]) == 2
    err = _errors(capsys)
    assert err["exit_code"] == 2 and "|b|f2 = 1 != 2" in " ".join(err["errors"])
    assert not (tmp_path / "o").exists()


def test_missing_seed_exits_2(tmp_path, capsys):
    assert cli.main(["solve-mfg", _write(tmp_path, {"model": {"lq": {}}})]) == 2
    assert any("seed" in e for e in _errors(capsys)["errors"])


def test_bad_values_exit_2(tmp_path, capsys):
    for bad in ({"N": 1}, {"damping": 0}, {"K_steps": -3}, {"model": {"lq": {"nope": 1}}}):
        cfg = _write(tmp_path, {"seed": 1, "model": {"lq": {}}, **bad})
        assert cli.main(["solve-mfg", cfg, "--out", str(tmp_path / "o")]) == 2
        assert _errors(capsys)["exit_code"] == 2


def test_seed_flag_overrides_config(tmp_path, capsys):
    assert cli.main(["check-monotone", _write(tmp_path, {"model": {"lq": {}}, "monotone": {"samples": 100}}),
                     "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((_run_dir(tmp_path / "o", "check-monotone") / "manifest.json").read_text())
    assert manifest["seed"] == 4


def test_manifest_lists_every_file(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["simulate-mkv", _write(tmp_path, {"seed": 2, **FAST}), "--out", str(out), "--threads", "1"]) == 0
    run_dir = _run_dir(out, "simulate-mkv")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    names = {p.name for p in run_dir.iterdir()} - {"manifest.json"}
    assert set(manifest["files"]) == names and {"flow.csv", "events.csv"} <= names
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((run_dir / name).read_bytes()).hexdigest() == digest
    assert manifest["threads"] == 1 and "numpy" in manifest["versions"]
    assert len(manifest["config_sha256"]) == 64


def test_solve_then_audit_from_saved_report(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["solve-mfg", _write(tmp_path, {"seed": 3, **FAST}), "--out", str(out)]) == 0
    solved = _run_dir(out, "solve-mfg")
    report = json.loads((solved / "report.json").read_text())
    assert report["converged"] is True and report["picard_gaps"][-1] < 0.05
    assert {"flow.csv", "events.csv"} <= {p.name for p in solved.iterdir()}
    cfg = {"seed": 3, **FAST, "audit": {"n_spikes": 3, "n_paths": 100, "report_dir": str(solved)}}
    assert cli.main(["audit", _write(tmp_path, cfg, "audit.json"), "--out", str(out)]) == 0
    table = json.loads((_run_dir(out, "audit") / "report.json").read_text())
    assert len(table["spikes"]) == 3 and table["converged"] is True


def test_audit_with_missing_report_dir(tmp_path, capsys):
    cfg = {"seed": 3, **FAST, "audit": {"report_dir": str(tmp_path / "missing")}}
    assert cli.main(["audit", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert "cannot load" in _errors(capsys)["errors"][0]


def test_simulate_pp_constant_rate(tmp_path):
    cfg = {"seed": 4, "point_process": {"kind": "constant", "rate": 3.0, "horizon": 2.0, "paths": 400}}
    out = tmp_path / "o"
    assert cli.main(["simulate-pp", _write(tmp_path, cfg), "--out", str(out)]) == 0
    report = json.loads((_run_dir(out, "simulate-pp") / "report.json").read_text())
    assert report["mean_count"] == pytest.approx(6.0, abs=0.5)


@pytest.mark.skipif(shutil.which("poissonmfg") is None, reason="console script not installed")
def test_console_script(tmp_path):
    cfg = _write(tmp_path, {"seed": 5, "model": {"portfolio": {}}, "monotone": {"samples": 200}})
    proc = subprocess.run(["poissonmfg", "check-monotone", cfg, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    report = json.loads((_run_dir(tmp_path / "o", "check-monotone") / "report.json").read_text())
    assert report["holds"] is True
