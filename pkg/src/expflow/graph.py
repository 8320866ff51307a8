"""Stages, pipelines and the polyforest they form.

Pipelines share stage vertices: a stage used by several pipelines is one
vertex. Dependencies are data edges, derived by matching each stage's
normalized input paths against other stages' outputs.
"""

from __future__ import annotations

import heapq
import posixpath
from dataclasses import dataclass, field
from typing import Mapping

from expflow.errors import (
    CycleError,
    DuplicateNameError,
    MultipleProducersError,
    StageDefinitionError,
    UnknownPipelineError,
    UnknownStageRefError,
)
from expflow.extensions import TypeRegistry, iter_bound
from expflow.spec.model import MAPPING, SCALAR, SEQUENCE, Diagnostic, ObjectNode, ResolvedDocument, Span, scalar_text


def normalize_path(path: str) -> str:
    """Forward slashes, ``.``/``..`` collapsed, no trailing slash."""
    p = path.replace("\\", "/")
    if not p:
        return p
    p = posixpath.normpath(p)
    if p.startswith("//"):
        p = "/" + p.lstrip("/")
    return p


@dataclass(frozen=True, eq=True)
class Stage:
    name: str
    script: tuple[str, ...]
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    params: Mapping[str, object] = field(default_factory=dict, hash=False)
    env: Mapping[str, str] = field(default_factory=dict, hash=False)
    always_run: bool = False
    span: Span | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        clash = set(self.inputs) & set(self.outputs)
        if clash:
            raise StageDefinitionError(
                f"stage {self.name!r}: path(s) both input and output: {', '.join(sorted(clash))}", self.span
            )


@dataclass(frozen=True)
class Pipeline:
    name: str
    stage_refs: tuple[str, ...]
    services: tuple[str, ...] = ()
    environment: str | None = None
    span: Span | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.stage_refs:
            raise StageDefinitionError(f"pipeline {self.name!r} lists no stages", self.span)
        seen = set()
        for ref in self.stage_refs:
            if ref in seen:
                raise StageDefinitionError(f"pipeline {self.name!r} lists stage {ref!r} twice", self.span)
            seen.add(ref)


@dataclass
class Polyforest:
    stages: dict[str, Stage] = field(default_factory=dict)
    pipelines: dict[str, Pipeline] = field(default_factory=dict)
    data_edges: set[tuple[str, str, str]] = field(default_factory=set)

    def producers(self) -> dict[str, str]:
        return {path: stage.name for stage in self.stages.values() for path in stage.outputs}

    def successors(self, stages=None) -> dict[str, set[str]]:
        members = set(self.stages) if stages is None else set(stages)
        adj: dict[str, set[str]] = {name: set() for name in members}
        for u, v, _ in self.data_edges:
            if u in members and v in members:
                adj[u].add(v)
        return adj

    def descendants(self, stage: str, within=None) -> set[str]:
        adj = self.successors(within)
        out: set[str] = set()
        todo = [stage]
        while todo:
            for nxt in adj.get(todo.pop(), ()):
                if nxt not in out:
                    out.add(nxt)
                    todo.append(nxt)
        return out

    def unused_stages(self) -> list[str]:
        used = {ref for p in self.pipelines.values() for ref in p.stage_refs}
        return sorted(set(self.stages) - used)


@dataclass(frozen=True)
class ExecutionPlan:
    pipeline: str
    ordered_stages: tuple[str, ...]
    reasons: Mapping[str, str] = field(default_factory=dict)
    warnings: tuple[Diagnostic, ...] = ()


# -- building --------------------------------------------------------------


def _strings(node: ObjectNode | None, what: str, owner: str, span) -> tuple[str, ...]:
    if node is None or (node.kind == SCALAR and node.scalar_value is None):
        return ()
    if node.kind != SEQUENCE:
        raise StageDefinitionError(f"{owner}: {what} must be a sequence", node.span or span)
    out = []
    for item in node.children:
        if item.kind != SCALAR or item.scalar_value is None:
            raise StageDefinitionError(f"{owner}: every entry of {what} must be a scalar", item.span or span)
        out.append(scalar_text(item.scalar_value))
    return tuple(out)


def _scalars(node: ObjectNode | None, what: str, owner: str, span) -> dict[str, object]:
    if node is None or (node.kind == SCALAR and node.scalar_value is None):
        return {}
    if node.kind != MAPPING:
        raise StageDefinitionError(f"{owner}: {what} must be a mapping", node.span or span)
    out = {}
    for key, child in node.children.items():
        if child.kind != SCALAR:
            raise StageDefinitionError(f"{owner}: {what}.{key} must be a scalar", child.span or span)
        out[key] = child.scalar_value
    return out


def stage_from_node(name: str, node: ObjectNode) -> Stage:
    owner = f"stage {name!r}"
    script_node = node.get("script")
    if script_node is not None and script_node.kind == SCALAR and isinstance(script_node.scalar_value, str):
        script = (script_node.scalar_value,)
    else:
        script = _strings(script_node, "script", owner, node.span)
    always = node.get("always_run")
    always_run = bool(always.scalar_value) if always is not None and always.kind == SCALAR else False
    return Stage(
        name=name,
        script=script,
        inputs=tuple(normalize_path(p) for p in _strings(node.get("inputs"), "inputs", owner, node.span)),
        outputs=tuple(normalize_path(p) for p in _strings(node.get("outputs"), "outputs", owner, node.span)),
        params=_scalars(node.get("params"), "params", owner, node.span),
        env={k: scalar_text(v) for k, v in _scalars(node.get("env"), "env", owner, node.span).items()},
        always_run=always_run,
        span=node.span,
    )


def build_polyforest(doc: ResolvedDocument, registry: TypeRegistry | None = None) -> Polyforest:
    registry = registry or TypeRegistry()
    forest = Polyforest()
    stage_nodes: dict[str, ObjectNode] = {}
    for obj in iter_bound(doc.objects, registry, ["stage"]):
        if obj.name is None:
            raise StageDefinitionError("stage inside a sequence needs a name field", obj.node.span)
        if obj.name in stage_nodes:
            if stage_nodes[obj.name] == obj.node:
                continue  # the same definition reached twice (e.g. via a placeholder copy)
            first = stage_nodes[obj.name].span
            where = f" (first defined at line {first.line})" if first else ""
            raise DuplicateNameError(
                f"duplicate stage name {obj.name!r}{where}",
                obj.node.span.line if obj.node.span else 0,
                obj.node.span.column if obj.node.span else 0,
            )
        stage_nodes[obj.name] = obj.node
        forest.stages[obj.name] = stage_from_node(obj.name, obj.node)

    for obj in iter_bound(doc.objects, registry, ["pipeline"]):
        if obj.name is None:
            raise StageDefinitionError("pipeline inside a sequence needs a name field", obj.node.span)
        if obj.name in forest.pipelines:
            raise StageDefinitionError(f"duplicate pipeline name {obj.name!r}", obj.node.span)
        owner = f"pipeline {obj.name!r}"
        refs = []
        stages_node = obj.node.get("stages")
        if stages_node is None or stages_node.kind != SEQUENCE:
            raise StageDefinitionError(f"{owner}: stages must be a sequence", obj.node.span)
        for item in stages_node.children:
            if item.kind == SCALAR and isinstance(item.scalar_value, str):
                ref = item.scalar_value
            elif item.kind == MAPPING and registry.binding(item.type_tag) == "stage":
                name_node = item.get("name")
                ref = scalar_text(name_node.scalar_value) if name_node is not None and name_node.is_scalar else None
                if ref is None:
                    raise StageDefinitionError(f"{owner}: inline stage needs a name field", item.span)
            else:
                raise UnknownStageRefError(f"{owner}: stage entries must be stage names", item.span)
            if ref not in forest.stages:
                raise UnknownStageRefError(f"{owner} references unknown stage {ref!r}", item.span or obj.node.span)
            refs.append(ref)
        env_node = obj.node.get("environment")
        environment = None
        if env_node is not None and env_node.kind == SCALAR and env_node.scalar_value is not None:
            environment = scalar_text(env_node.scalar_value)
        forest.pipelines[obj.name] = Pipeline(
            obj.name,
            tuple(refs),
            _strings(obj.node.get("services"), "services", owner, obj.node.span),
            environment,
            obj.node.span,
        )

    return link(forest)


def link(forest: Polyforest) -> Polyforest:
    """Recompute data edges from the stages' declared inputs and outputs."""
    producers: dict[str, str] = {}
    for stage in forest.stages.values():
        for path in stage.outputs:
            if path in producers:
                raise MultipleProducersError(
                    f"path {path!r} is an output of both {producers[path]!r} and {stage.name!r}", stage.span
                )
            producers[path] = stage.name
    forest.data_edges = set()
    for stage in forest.stages.values():
        for path in stage.inputs:
            if path in producers:
                forest.data_edges.add((producers[path], stage.name, path))
    return forest


def make_forest(stages, pipelines=()) -> Polyforest:
    """Build a forest from Stage and Pipeline objects."""
    forest = Polyforest({s.name: s for s in stages}, {p.name: p for p in pipelines})
    for p in forest.pipelines.values():
        for ref in p.stage_refs:
            if ref not in forest.stages:
                raise UnknownStageRefError(f"pipeline {p.name!r} references unknown stage {ref!r}", p.span)
    return link(forest)


# -- analysis --------------------------------------------------------------


def detect_cycles(forest: Polyforest, limit: int = 1000) -> list[list[str]]:
    """Elementary cycles over all data edges.

    Each cycle starts at its lexicographically smallest member; the list is
    sorted. At most ``limit`` cycles are reported.
    """
    adj = {name: sorted(succ) for name, succ in forest.successors().items()}
    cycles: list[list[str]] = []
    for start in sorted(adj):
        # only visit vertices greater than start so each cycle is found once
        stack = [(start, iter(adj[start]))]
        path = [start]
        on_path = {start}
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if nxt == start:
                    cycles.append(list(path))
                    if len(cycles) >= limit:
                        return sorted(cycles)
                elif nxt > start and nxt not in on_path:
                    stack.append((nxt, iter(adj[nxt])))
                    path.append(nxt)
                    on_path.add(nxt)
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                on_path.discard(path.pop())
    return sorted(cycles)


def ancestors(forest: Polyforest, stage: str, within) -> set[str]:
    preds: dict[str, set[str]] = {name: set() for name in within}
    for u, v, _ in forest.data_edges:
        if u in preds and v in preds:
            preds[v].add(u)
    out: set[str] = set()
    todo = [stage]
    while todo:
        for p in preds[todo.pop()]:
            if p not in out:
                out.add(p)
                todo.append(p)
    return out


def plan(forest: Polyforest, pipeline: str, target_stage: str | None = None) -> ExecutionPlan:
    """Topological order of a pipeline's stages; ties follow the pipeline's stage list."""
    if pipeline not in forest.pipelines:
        known = ", ".join(sorted(forest.pipelines)) or "none"
        raise UnknownPipelineError(f"unknown pipeline {pipeline!r} (known: {known})")
    pipe = forest.pipelines[pipeline]
    members = list(pipe.stage_refs)
    reasons = {name: f"listed in pipeline {pipeline}" for name in members}
    if target_stage is not None:
        if target_stage not in members:
            raise UnknownStageRefError(f"stage {target_stage!r} is not part of pipeline {pipeline!r}")
        keep = ancestors(forest, target_stage, members) | {target_stage}
        members = [m for m in members if m in keep]
        reasons = {m: f"upstream of target {target_stage}" for m in members}
        reasons[target_stage] = "requested target"

    position = {name: i for i, name in enumerate(members)}
    adj = forest.successors(members)
    indegree = {name: 0 for name in members}
    for succ in adj.values():
        for v in succ:
            indegree[v] += 1
    ready = [(position[n], n) for n in members if indegree[n] == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, node = heapq.heappop(ready)
        order.append(node)
        for nxt in adj[node]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(ready, (position[nxt], nxt))
    if len(order) != len(members):
        sub = Polyforest({n: forest.stages[n] for n in members}, {}, {e for e in forest.data_edges
                                                                     if e[0] in position and e[1] in position})
        cycles = detect_cycles(sub)
        members_in_cycle = cycles[0] if cycles else sorted(set(members) - set(order))
        raise CycleError(members_in_cycle, f"pipeline {pipeline!r} has a dependency cycle: "
                         + " -> ".join(members_in_cycle + members_in_cycle[:1]))

    warnings: list[Diagnostic] = []
    if order != members:
        warnings.append(Diagnostic(
            "warning",
            f"pipeline {pipeline}: stage order {', '.join(members)} contradicts data dependencies; "
            f"running {', '.join(order)}",
            pipe.span,
        ))
    producers = forest.producers()
    member_set = set(members)
    for name in order:
        for path in forest.stages[name].inputs:
            producer = producers.get(path)
            if producer is not None and producer not in member_set and target_stage is None:
                warnings.append(Diagnostic(
                    "warning",
                    f"pipeline {pipeline}: input {path} of stage {name} is produced by stage {producer}, "
                    f"which is not in the pipeline",
                    pipe.span,
                ))
    return ExecutionPlan(pipeline, tuple(order), reasons, tuple(warnings))


def _dot_id(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(forest: Polyforest) -> str:
    lines = ["digraph expflow {"]
    for name in sorted(forest.stages):
        lines.append(f"  {_dot_id(name)};")
    for u, v, path in sorted(forest.data_edges):
        lines.append(f"  {_dot_id(u)} -> {_dot_id(v)} [label={_dot_id(path)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
