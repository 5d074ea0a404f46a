import shutil
import subprocess

import pytest

from ptsim.cli import main
from test_harness import HEADER


def test_cli_writes_outputs(tmp_path, capsys):
    out, summ = tmp_path / "m.csv", tmp_path / "s.json"
    rc = main(["--scenario", "pre", "--minutes", "2", "--seed", "4",
               "--out", str(out), "--summary", str(summ)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 3
    assert '"scenario": "pre"' in summ.read_text()
    assert "pre: 2 min" in capsys.readouterr().out


def test_cli_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("scenario = baseline\nminutes = 9\nprocess_rate = 20\n")
    out = tmp_path / "m.csv"
    assert main(["--config", str(cfg), "--minutes", "1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("seed = 1\nnot_a_key = 2\n")
    assert main(["--config", str(cfg)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_cli_invariant_violation_exit_code(tmp_path, capsys):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("pool_frames = 600\ndata_pool_frames = 8\n")
    assert main(["--config", str(cfg), "--minutes", "1"]) == 3
    assert "invariant violation" in capsys.readouterr().err


def test_cli_rejects_unknown_scenario():
    with pytest.raises(SystemExit):
        main(["--scenario", "warp"])


@pytest.mark.skipif(shutil.which("simulate") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = tmp_path / "m.csv"
    proc = subprocess.run(
        ["simulate", "--minutes", "1", "--out", str(out)], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().startswith("minute,flushes_pt")
