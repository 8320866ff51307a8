from __future__ import annotations

import subprocess
import sys

import pytest

from conftest import write_spec


def test_no_command_is_usage_error(cli):
    result = cli()
    assert result.code == 3 and "missing command" in result.err


@pytest.mark.parametrize("args", [["bogus"], ["run"], ["run", "p", "--bogus"], ["repro", "p", "--runs", "1"],
                                  ["graph", "--format", "png"], ["init"]])
def test_usage_errors(cli, tmp_path, args):
    write_spec(tmp_path, "s: !Stage\n  script: [true]\np: !Pipeline\n  stages: [s]\n")
    assert cli(*args, cwd=tmp_path).code == 3


def test_help_exits_zero(cli):
    assert cli("--help").code == 0


def test_check_ok(cli, workspace):
    ws = workspace("diamond")
    result = cli("check", cwd=ws)
    assert (result.code, result.out.strip(), result.err) == (0, "OK: 4 stages, 1 pipelines", "")


def test_check_reports_positions(cli, tmp_path):
    spec = write_spec(tmp_path, "s: !Stag\n  script: [true]\n")
    result = cli("-f", spec, "check")
    assert result.code == 2 and result.out == ""
    assert f"{spec}:1:4: error:" in result.err
    assert "did you mean !Stage" in result.err


def test_check_cycle(cli, workspace):
    result = cli("check", cwd=workspace("cycle"))
    assert result.code == 2 and "dependency cycle: a -> b -> a" in result.err


def test_missing_spec_file(cli, tmp_path):
    result = cli("-f", tmp_path / "absent.yml", "check")
    assert result.code == 2 and "absent.yml" in result.err


def test_unknown_pipeline(cli, workspace):
    result = cli("run", "nope", cwd=workspace("diamond"))
    assert result.code == 2 and "nope" in result.err


def test_run_then_cached(cli, workspace):
    ws = workspace("diamond")
    first = cli("run", "main", cwd=ws)
    assert first.code == 0 and first.out.count("succeeded") == 4
    assert first.out.rstrip().endswith("status: ok")
    second = cli("run", "main", cwd=ws)
    assert second.code == 0 and second.out.count("skipped-cache") == 4
    assert (ws / "data" / "merged.txt").read_text() == "raw\nleft\nraw\nright\n"


def test_run_failure_exit_code(cli, tmp_path):
    write_spec(tmp_path, "s: !Stage\n  script: ['exit 7']\nt: !Stage\n  script: [true]\n"
                         "p: !Pipeline\n  stages: [s, t]\n")
    result = cli("run", "p", cwd=tmp_path)
    assert result.code == 1
    assert "stage s failed (exit code 7)" in result.err
    assert "skipped-upstream-failure" in result.out


def test_quiet_mode_silences_stdout_only(cli, tmp_path):
    write_spec(tmp_path, "s: !Stage\n  script: ['exit 1']\np: !Pipeline\n  stages: [s]\n")
    result = cli("-q", "run", "p", cwd=tmp_path)
    assert result.code == 1 and result.out == "" and "stage s failed" in result.err
    assert cli("-q", "check", cwd=tmp_path).out == ""


def test_stage_option_runs_ancestors_only(cli, workspace):
    ws = workspace("diamond")
    result = cli("run", "main", "--stage", "left", cwd=ws)
    assert result.code == 0
    assert (ws / "data" / "left.txt").exists() and not (ws / "data" / "right.txt").exists()


def test_dry_run(cli, workspace):
    ws = workspace("diamond")
    result = cli("run", "main", "--dry-run", cwd=ws)
    assert result.code == 0 and result.out.count("dry-run") == 4
    assert not (ws / "data").exists()
    assert [p.name for p in (ws / ".expflow").iterdir()] == ["logs"]


def test_force_and_no_cache(cli, workspace):
    ws = workspace("diamond")
    cli("run", "main", cwd=ws)
    assert cli("run", "main", "--force", cwd=ws).out.count("succeeded") == 4
    assert cli("run", "main", "--no-cache", cwd=ws).out.count("succeeded") == 4


def test_status(cli, workspace):
    ws = workspace("diamond")
    assert cli("status", cwd=ws).out.strip() == "no runs recorded"
    run = cli("run", "main", cwd=ws)
    run_id = run.out.split()[1]
    result = cli("status", cwd=ws)
    assert result.code == 0 and f"last run: {run_id}" in result.out
    assert "status:   ok" in result.out
    assert cli("status", "other", cwd=ws).out.strip() == "no runs recorded"


def test_graph_diamond(cli, workspace):
    result = cli("graph", cwd=workspace("diamond"))
    lines = result.out.splitlines()
    assert result.code == 0 and lines[0] == "digraph expflow {" and lines[-1] == "}"
    assert sum(1 for line in lines if line.strip().endswith(";") and "->" not in line) == 4
    assert sum(1 for line in lines if "->" in line) == 4
    assert '  "prep" -> "left" [label="data/prep.txt"];' in lines


def test_clean(cli, workspace):
    ws = workspace("diamond")
    cli("run", "main", cwd=ws)
    meta = ws / ".expflow"
    assert cli("clean", "--logs", cwd=ws).code == 0
    assert not (meta / "logs").exists() and (meta / "cache").exists() and (meta / "ledger.jsonl").exists()
    cli("clean", cwd=ws)
    assert not (meta / "cache").exists() and (meta / "ledger.jsonl").exists()
    # skipping depends on the ledger and the outputs on disk, not on the store
    assert cli("run", "main", cwd=ws).out.count("skipped-cache") == 4


def test_repro(cli, workspace):
    good = cli("repro", "main", cwd=workspace("deterministic"))
    assert good.code == 0 and "REPEATABLE" in good.out
    bad = cli("repro", "main", cwd=workspace("timestamp"))
    assert bad.code == 1 and "NOT REPEATABLE" in bad.out and "out/stamp.txt" in bad.out


def test_init_and_list(cli, tmp_path):
    listing = cli("init", "--list")
    assert listing.code == 0 and listing.out.startswith("template-default\t")
    result = cli("init", "template-default", tmp_path / "exp", "--var", "experiment_name=demo", "--no-git")
    assert result.code == 0 and "experiment.yml" in result.out
    assert (tmp_path / "exp" / "README.md").read_text().startswith("# demo")
    again = cli("init", "template-default", tmp_path / "exp")
    assert again.code == 2 and "not empty" in again.err
    assert cli("init", "template-default", tmp_path / "x", "--var", "novalue").code == 3
    assert cli("init", "ghost", tmp_path / "y").code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "expflow", "init", "--list"], capture_output=True, text=True)
    assert proc.returncode == 0 and "template-default" in proc.stdout
