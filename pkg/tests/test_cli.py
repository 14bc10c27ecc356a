import json
import shutil
import subprocess
import sys

import pytest

from enfed.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERDICT, main, sim_main
from conftest import SCENARIOS


def test_help_lists_every_subcommand(capsys):
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for word in ("serve", "registry", "sim", "init", "add", "verify", "list",
                 "run", "check-alt2", "estimate-bandwidth"):
        assert word in out


@pytest.mark.parametrize("argv", [
    ["serve", "--region", "XX!", "--config", "c", "--registry", "r"],
    ["bogus"],
    ["sim", "run"],
    ["sim", "estimate-bandwidth", "--infections", "0"],
    ["--clock", "sundial", "sim", "run", "x"],
    ["sim", "run", "x", "--no-such-flag"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_sim_run_writes_report(tmp_path, capsys):
    report = tmp_path / "f1.txt"
    assert main(["sim", "run", str(SCENARIOS / "f1_alice_bob.scn"), "--report", str(report)]) == EXIT_OK
    assert "PASS" in report.read_text()
    assert main(["sim", "run", str(SCENARIOS / "f1_alice_bob.scn"), "--format", "json",
                 "--seed", "3"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1])["summary"]["seed"] == 3


def test_sim_run_missing_file_is_runtime_error(tmp_path):
    assert main(["sim", "run", str(tmp_path / "nope.scn")]) == EXIT_RUNTIME


def test_verdict_failure_exits_nonzero(tmp_path, monkeypatch):
    import enfed.cli as cli

    class Failing:
        passed = False
        scenario = "x"

        def to_text(self):
            return "FAIL\n"

    monkeypatch.setattr(cli, "run_scenario", lambda sc: Failing())
    assert main(["sim", "run", str(SCENARIOS / "f1_alice_bob.scn")]) == EXIT_VERDICT


def test_check_alt2(capsys):
    assert sim_main(["check-alt2", str(SCENARIOS / "alt2_cluster.scn")]) == EXIT_OK
    assert "equivalent" in capsys.readouterr().out
    assert main(["sim", "check-alt2", str(SCENARIOS / "f1_alice_bob.scn")]) == EXIT_RUNTIME


def test_estimate_bandwidth(capsys):
    assert main(["sim", "estimate-bandwidth", "--keys", "14", "--key-bytes", "16",
                 "--infections", "200000", "--population", "330e6", "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["per_user_bytes_per_day"] == 44_800_000
    assert doc["aggregate_bytes_per_day"] == 14_784_000_000_000_000


def test_registry_workflow(tmp_path, capsys):
    reg = str(tmp_path / "registry.dat")
    root = str(tmp_path / "root.key")
    assert main(["registry", "init", reg, "--root-key", root, "--root-name", "WHO"]) == EXIT_OK
    assert main(["registry", "init", reg, "--root-key", root]) == EXIT_USAGE
    for r, port in (("CH", 8001), ("IT", 8002)):
        assert main(["registry", "add", reg, "--region", r, "--url", f"http://127.0.0.1:{port}",
                     "--root-key", root, "--root-name", "WHO", "--cluster", "EU",
                     "--cluster-key", str(tmp_path / "eu.key"),
                     "--backend-key", str(tmp_path / f"{r}.key")]) == EXIT_OK
    assert main(["registry", "add", reg, "--region", "FR"]) == EXIT_USAGE
    capsys.readouterr()
    assert main(["registry", "verify", reg]) == EXIT_OK
    assert "2 valid records, 0 rejected" in capsys.readouterr().out
    assert main(["registry", "list", reg]) == EXIT_OK
    assert [ln.split("\t")[0] for ln in capsys.readouterr().out.splitlines()] == ["CH", "IT"]
    # a backend signed under a different root is refused
    main(["registry", "init", str(tmp_path / "other.dat"), "--root-key", str(tmp_path / "other-root.key")])
    assert main(["registry", "add", reg, "--region", "FR", "--url", "http://x", "--root-key",
                 str(tmp_path / "other-root.key"), "--backend-key", str(tmp_path / "fr.key")]) \
        == EXIT_RUNTIME
    text = open(reg).read().replace("127.0.0.1:8001", "127.0.0.1:9999")
    open(reg, "w").write(text)
    assert main(["registry", "verify", reg]) == EXIT_RUNTIME


def test_serve_runs_and_stops(tmp_path, capsys):
    reg = str(tmp_path / "registry.dat")
    root = str(tmp_path / "root.key")
    key = tmp_path / "ch.key"
    main(["registry", "init", reg, "--root-key", root])
    main(["registry", "add", reg, "--region", "CH", "--url", "http://127.0.0.1:0",
          "--root-key", root, "--backend-key", str(key)])
    cfg = tmp_path / "ch.yaml"
    cfg.write_text(f"region: CH\nsigning_key_seed: '{key.read_text().strip()}'\n"
                   f"data_dir: '{tmp_path / 'data'}'\n")
    rc = main(["--clock", "simulated", "serve", "--config", str(cfg), "--registry", reg,
               "--listen", "127.0.0.1:0", "--tick", "0.05", "--duration", "0.3"])
    assert rc == EXIT_OK
    assert "backend CH serving on http://127.0.0.1:" in capsys.readouterr().out


@pytest.mark.skipif(shutil.which("en") is None, reason="console script not installed")
def test_installed_entry_point():
    r = subprocess.run(["en", "sim", "run", str(SCENARIOS / "f1_alice_bob.scn")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "PASS" in r.stdout
    r = subprocess.run([sys.executable, "-m", "enfed.cli", "serve", "--region", "XX!",
                        "--config", "c", "--registry", "r"], capture_output=True, text=True)
    assert r.returncode == 2
