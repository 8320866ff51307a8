"""Scaffolding of new experiment repositories from templates.

A template is a directory with a ``template.yml`` manifest; every other
file is copied into the destination. Text files have their ``{{name}}``
placeholders filled in, binary files are copied verbatim. The tree is
staged in a temporary directory next to the destination and renamed into
place, so a failure leaves the destination as it was found.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from expflow.errors import (
    DestNotEmptyError,
    ExpflowError,
    TemplateError,
    UnknownTemplateError,
    UnknownVariableError,
)
from expflow.spec.model import MAPPING, SCALAR, SEQUENCE, scalar_text
from expflow.spec.parser import parse_node

log = logging.getLogger(__name__)

MANIFEST = "template.yml"
TEMPLATE_PATH_ENV = "EXPFLOW_TEMPLATE_PATH"
BUILTIN_DIR = Path(__file__).parent / "builtin"
BINARY_SNIFF = 8192
PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")


@dataclass(frozen=True)
class TemplateVariable:
    name: str
    prompt: str = ""
    default: str | None = None


@dataclass(frozen=True)
class TemplateManifest:
    name: str
    description: str = ""
    variables: tuple[TemplateVariable, ...] = ()
    path: Path | None = field(default=None, compare=False)
    builtin: bool = field(default=False, compare=False)

    def __post_init__(self):
        names = [v.name for v in self.variables]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise TemplateError(f"template {self.name!r}: duplicate variable(s) {', '.join(dupes)}")

    def defaults(self) -> dict[str, str]:
        return {v.name: v.default for v in self.variables if v.default is not None}


@dataclass
class InitReport:
    template: str
    dest: Path
    files: list[str]
    vcs: str | None = None
    notes: list[str] = field(default_factory=list)


def _text(node, what: str, where: Path) -> str:
    if node is None:
        return ""
    if node.kind != SCALAR:
        raise TemplateError(f"{where}: {what} must be a plain string")
    return "" if node.scalar_value is None else scalar_text(node.scalar_value)


def load_manifest(template_dir, builtin: bool = False) -> TemplateManifest:
    template_dir = Path(template_dir)
    path = template_dir / MANIFEST
    try:
        root = parse_node(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise TemplateError(f"{path}: cannot read manifest: {exc}") from None
    except (UnicodeDecodeError, ExpflowError) as exc:
        raise TemplateError(f"{path}: invalid manifest: {exc}") from None
    name = _text(root.get("name"), "name", path) or template_dir.name
    variables = []
    vars_node = root.get("variables")
    if vars_node is not None and not (vars_node.kind == SCALAR and vars_node.scalar_value is None):
        if vars_node.kind != SEQUENCE:
            raise TemplateError(f"{path}: variables must be a list")
        for item in vars_node.children:
            if item.kind != MAPPING or item.get("name") is None:
                raise TemplateError(f"{path}: every variable needs a name")
            default = item.get("default")
            variables.append(TemplateVariable(
                _text(item.get("name"), "variable name", path),
                _text(item.get("prompt"), "prompt", path),
                None if default is None or default.scalar_value is None else _text(default, "default", path),
            ))
    return TemplateManifest(name, _text(root.get("description"), "description", path), tuple(variables),
                            template_dir, builtin)


def _search_dirs(environ: Mapping[str, str] | None) -> list[Path]:
    environ = os.environ if environ is None else environ
    return [Path(p) for p in environ.get(TEMPLATE_PATH_ENV, "").split(os.pathsep) if p]


def discover_templates(environ: Mapping[str, str] | None = None) -> tuple[list[TemplateManifest], list[str]]:
    """All usable templates plus warnings about skipped or shadowed ones."""
    found: dict[str, TemplateManifest] = {}
    warnings: list[str] = []
    candidates = [(d, True) for d in sorted(BUILTIN_DIR.iterdir()) if (d / MANIFEST).is_file()]
    for base in _search_dirs(environ):
        if (base / MANIFEST).is_file():
            candidates.append((base, False))
        elif base.is_dir():
            candidates.extend((d, False) for d in sorted(base.iterdir()) if (d / MANIFEST).is_file())
    for directory, builtin in candidates:
        try:
            manifest = load_manifest(directory, builtin)
        except TemplateError as exc:
            warnings.append(f"skipping template at {directory}: {exc}")
            continue
        if manifest.name in found:
            winner = found[manifest.name]
            warnings.append(f"template {manifest.name} at {directory} is shadowed by {winner.path}")
            continue
        found[manifest.name] = manifest
    return sorted(found.values(), key=lambda m: m.name), warnings


def list_templates(environ: Mapping[str, str] | None = None) -> list[TemplateManifest]:
    manifests, warnings = discover_templates(environ)
    for w in warnings:
        log.warning(w)
    return manifests


def find_template(template_src, environ: Mapping[str, str] | None = None) -> TemplateManifest:
    src = Path(str(template_src))
    if (src / MANIFEST).is_file():
        return load_manifest(src)
    manifests, _ = discover_templates(environ)
    for m in manifests:
        if m.name == str(template_src):
            return m
    available = ", ".join(m.name for m in manifests) or "none"
    raise UnknownTemplateError(f"unknown template {template_src!r} (available: {available})")


def is_binary(data: bytes) -> bool:
    return b"\0" in data[:BINARY_SNIFF]


def substitute(text: str, values: Mapping[str, str], where: str = "") -> str:
    def repl(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise UnknownVariableError(f"{where}: placeholder {{{{{name}}}}} has no value and no default")
        return values[name]

    return PLACEHOLDER.sub(repl, text)


def _is_empty_dir(path: Path) -> bool:
    return path.is_dir() and not any(path.iterdir())


def init_from_template(template_src, dest, variables: Mapping[str, str] | None = None,
                       environ: Mapping[str, str] | None = None, vcs: bool = True) -> InitReport:
    dest = Path(dest)
    if dest.exists() and not _is_empty_dir(dest):
        raise DestNotEmptyError(f"destination {dest} exists and is not empty")
    manifest = find_template(template_src, environ)
    values = manifest.defaults()
    values.update(variables or {})
    src = manifest.path
    assert src is not None

    dest.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    report = InitReport(manifest.name, dest, [])
    try:
        for dirpath, dirnames, filenames in os.walk(src):
            dirnames.sort()
            rel_dir = Path(dirpath).relative_to(src)
            for fname in sorted(filenames):
                rel = (rel_dir / fname).as_posix()
                if rel == MANIFEST or fname.endswith((".pyc", ".pyo")):
                    continue
                rel_out = substitute(rel, values, rel)
                target = staging / rel_out
                target.parent.mkdir(parents=True, exist_ok=True)
                source = Path(dirpath) / fname
                data = source.read_bytes()
                if not is_binary(data):
                    text = data.decode("utf-8", "surrogateescape")
                    data = substitute(text, values, rel).encode("utf-8", "surrogateescape")
                target.write_bytes(data)
                shutil.copymode(source, target)
                report.files.append(rel_out)
            for d in dirnames:
                if d != "__pycache__":
                    (staging / substitute((rel_dir / d).as_posix(), values, str(rel_dir / d))).mkdir(
                        parents=True, exist_ok=True)
            dirnames[:] = [d for d in dirnames if d != "__pycache__"]
        if vcs:
            report.vcs = _init_vcs(staging, report.notes)
        if dest.exists():
            dest.rmdir()
        os.replace(staging, dest)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    report.files.sort()
    return report


def _init_vcs(path: Path, notes: list[str]) -> str | None:
    git = shutil.which("git")
    if git is None:
        notes.append("git not found on PATH; repository not initialized")
        return None
    proc = subprocess.run([git, "init", "-q"], cwd=path, capture_output=True, text=True)
    if proc.returncode != 0:
        notes.append(f"git init failed: {proc.stderr.strip()}")
        return None
    return "git"
