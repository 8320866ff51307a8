from __future__ import annotations

import io
import shutil
from dataclasses import dataclass
from pathlib import Path

import pytest

from expflow.cli import main

FIXTURES = Path(__file__).parent / "fixtures"

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@dataclass
class CliResult:
    code: int
    out: str
    err: str


@pytest.fixture
def workspace(tmp_path):
    """Copy a named fixture directory into a fresh workspace."""

    def make(name: str) -> Path:
        dest = tmp_path / name
        shutil.copytree(FIXTURES / name, dest)
        return dest

    return make


@pytest.fixture
def cli(monkeypatch):
    monkeypatch.delenv("EXPFLOW_WORKSPACE", raising=False)

    def invoke(*args, cwd=None) -> CliResult:
        if cwd is not None:
            monkeypatch.chdir(cwd)
        out, err = io.StringIO(), io.StringIO()
        code = main([str(a) for a in args], stdout=out, stderr=err)
        return CliResult(code, out.getvalue(), err.getvalue())

    return invoke


def write_spec(directory: Path, text: str, name: str = "experiment.yml") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(text, encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
