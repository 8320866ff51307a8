"""High-level operations on an experiment workspace: load, check, run, repro."""

from __future__ import annotations

import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from expflow.cache import Cache, ReproReport, compare_runs, prune_paths, sha256_bytes
from expflow.errors import CycleError, StageDefinitionError, ValidationError
from expflow.executor import EnvironmentSpec, RunContext, prepare_environment, run_pipeline
from expflow.extensions import TypeRegistry, build_registry, iter_bound
from expflow.graph import ExecutionPlan, Polyforest, build_polyforest, detect_cycles, plan
from expflow.records import RunRecord
from expflow.services import ServiceSpec
from expflow.spec.model import MAPPING, SCALAR, SEQUENCE, Diagnostic, ResolvedDocument, SpecDocument, Number, scalar_text, to_python
from expflow.spec.parser import parse_file
from expflow.spec.resolver import resolve
from expflow.spec.serializer import dump_objects
from expflow.spec.validator import validate

SPEC_FILE = "experiment.yml"
WORKSPACE_ENV = "EXPFLOW_WORKSPACE"
PLUGIN_PATHS_KEY = "plugin_paths"
SERVICE_BINDINGS = ("metrics", "webhook")


def default_env(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """Variables visible to ``${env.X}``: the process env plus EXPFLOW_PYTHON."""
    env = dict(os.environ if environ is None else environ)
    env.setdefault("EXPFLOW_PYTHON", sys.executable)
    return env


@dataclass
class Project:
    spec_path: Path
    workspace: Path
    document: SpecDocument
    resolved: ResolvedDocument
    registry: TypeRegistry
    forest: Polyforest
    diagnostics: list[Diagnostic] = field(default_factory=list)
    env: dict[str, str] = field(default_factory=dict)

    @property
    def spec_digest(self) -> str:
        return sha256_bytes(dump_objects(self.resolved.objects).encode("utf-8"))

    def environment(self, pipeline: str) -> EnvironmentSpec:
        name = self.forest.pipelines[pipeline].environment
        if name is None:
            return EnvironmentSpec()
        for obj in iter_bound(self.resolved.objects, self.registry, ["environment"]):
            if obj.name == name:
                return environment_from_node(name, obj.node)
        raise StageDefinitionError(f"pipeline {pipeline!r}: unknown environment {name!r}",
                                   self.forest.pipelines[pipeline].span)

    def services(self, pipeline: str) -> list[ServiceSpec]:
        wanted = self.forest.pipelines[pipeline].services
        found = {obj.name: obj for obj in iter_bound(self.resolved.objects, self.registry, SERVICE_BINDINGS)}
        specs = []
        for name in wanted:
            obj = found.get(name)
            if obj is None:
                raise StageDefinitionError(f"pipeline {pipeline!r}: unknown service {name!r}",
                                           self.forest.pipelines[pipeline].span)
            config = {k: _plain(to_python(v)) for k, v in obj.node.children.items()}
            specs.append(ServiceSpec(name, obj.binding, config))
        return specs

    def plan(self, pipeline: str, target_stage: str | None = None) -> ExecutionPlan:
        return plan(self.forest, pipeline, target_stage)


def _plain(value):
    """Spec values with numbers turned into int/float, for service configs."""
    if isinstance(value, Number):
        return value.to_python()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def environment_from_node(name: str, node) -> EnvironmentSpec:
    prepare: tuple[str, ...] = ()
    p = node.get("prepare")
    if p is not None and p.kind == SEQUENCE:
        prepare = tuple(scalar_text(c.scalar_value) for c in p.children if c.kind == SCALAR)
    elif p is not None and p.kind == SCALAR and isinstance(p.scalar_value, str):
        prepare = (p.scalar_value,)
    env_vars = {}
    v = node.get("vars")
    if v is not None and v.kind == MAPPING:
        env_vars = {k: scalar_text(c.scalar_value) for k, c in v.children.items() if c.kind == SCALAR}
    return EnvironmentSpec(name, prepare, env_vars)


def workspace_for(spec_path: Path, environ: Mapping[str, str] | None = None) -> Path:
    environ = os.environ if environ is None else environ
    override = environ.get(WORKSPACE_ENV)
    return Path(override).resolve() if override else spec_path.resolve().parent


def _plugin_paths(doc: SpecDocument) -> list[str]:
    node = doc.objects.get(PLUGIN_PATHS_KEY)
    if node is None:
        return []
    if node.kind == SCALAR and isinstance(node.scalar_value, str):
        return [node.scalar_value]
    if node.kind == SEQUENCE:
        return [scalar_text(c.scalar_value) for c in node.children if c.kind == SCALAR]
    raise StageDefinitionError(f"{PLUGIN_PATHS_KEY} must be a path or a list of paths", node.span)


def load_project(spec_path, workspace=None, environ: Mapping[str, str] | None = None) -> Project:
    """Parse, resolve, validate and build the stage graph.

    Raises ValidationError when validation reports errors; the other
    SpecError subclasses propagate from the individual phases.
    """
    spec_path = Path(spec_path)
    env = default_env(environ)
    doc = parse_file(spec_path)
    registry = build_registry(_plugin_paths(doc), spec_path.resolve().parent, env)
    resolved = resolve(doc, registry, env)
    diagnostics = validate(resolved, registry)
    if any(d.severity == "error" for d in diagnostics):
        raise ValidationError(diagnostics)
    forest = build_polyforest(resolved, registry)
    ws = Path(workspace).resolve() if workspace is not None else workspace_for(spec_path, env)
    return Project(spec_path, ws, doc, resolved, registry, forest, diagnostics, env)


def check(project: Project) -> list[Diagnostic]:
    """Whole-document analysis: cycles, plan warnings and unused stages."""
    cycles = detect_cycles(project.forest)
    if cycles:
        first = cycles[0]
        raise CycleError(first, f"dependency cycle: {' -> '.join(first + first[:1])}"
                         + (f" (and {len(cycles) - 1} more)" if len(cycles) > 1 else ""),
                         project.forest.stages[first[0]].span)
    diagnostics = list(project.diagnostics)
    for name in project.forest.pipelines:
        diagnostics.extend(project.plan(name).warnings)
        project.environment(name)
        project.services(name)
    for name in project.forest.unused_stages():
        diagnostics.append(Diagnostic("info", f"stage {name} is not used by any pipeline",
                                      project.forest.stages[name].span))
    return diagnostics


@dataclass
class RunOutcome:
    record: RunRecord
    context: RunContext
    plan: ExecutionPlan


def run(project: Project, pipeline: str, *, stage: str | None = None, force: bool = False,
        dry_run: bool = False, use_cache: bool = True, service_factories=None, on_stage=None) -> RunOutcome:
    execution_plan = project.plan(pipeline, stage)
    env_spec = project.environment(pipeline)
    cache = Cache(project.workspace)
    ctx = RunContext.create(project.workspace, existing_ids=cache.ledger.run_ids(), dry_run=dry_run,
                            force=force, env=env_spec, use_cache=use_cache)
    for warning in execution_plan.warnings:
        ctx.note(f"warning: {warning.message}")
    if not dry_run:
        with cache.lock:
            prepare_environment(env_spec, ctx)
    record = run_pipeline(execution_plan, ctx, project.forest, cache, project.services(pipeline),
                          project.spec_digest, service_factories, on_stage)
    return RunOutcome(record, ctx, execution_plan)


def _copy_workspace(src: Path, dest: Path) -> None:
    shutil.copytree(src, dest, symlinks=True, ignore=shutil.ignore_patterns(".expflow"))


def repro(project: Project, pipeline: str, runs: int = 2, keep: bool = False) -> tuple[ReproReport, list[RunRecord]]:
    """Run ``pipeline`` ``runs`` times from scratch copies and compare each run to the first."""
    if runs < 2:
        raise ValueError("repro needs at least 2 runs")
    execution_plan = project.plan(pipeline)
    outputs = [p for name in execution_plan.ordered_stages for p in project.forest.stages[name].outputs]
    records: list[RunRecord] = []
    scratch_root = Path(tempfile.mkdtemp(prefix="expflow-repro-"))
    try:
        for i in range(runs):
            scratch = scratch_root / f"run{i + 1}"
            _copy_workspace(project.workspace, scratch)
            prune_paths(scratch, outputs)
            try:
                rel = project.spec_path.resolve().relative_to(project.workspace)
                spec = scratch / rel
            except ValueError:
                spec = project.spec_path
            copy = load_project(spec, workspace=scratch, environ=project.env)
            records.append(run(copy, pipeline, force=True).record)
    finally:
        if not keep:
            shutil.rmtree(scratch_root, ignore_errors=True)
    reports = [compare_runs(records[0], other) for other in records[1:]]
    worst = next((r for r in reports if not r.repeatable), reports[0])
    return worst, records
