"""Type registry, plugin manifests and command-line tool adapters.

The core only interprets specifications. Plugins contribute declarative
type descriptors bound to one of a closed set of behaviour kinds, and tool
adapters that run third-party programs through their command-line
interface. Nothing is imported or executed when a manifest is loaded.
"""

from __future__ import annotations

import logging
import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from expflow.errors import (
    DuplicateTypeError,
    InvalidDescriptorError,
    ManifestFormatError,
    MissingBindingError,
    ParseError,
    SpawnError,
    UnknownBehaviorBindingError,
    UnknownReferenceError,
)
from expflow.spec.expressions import ExpressionSyntaxError, parse_expression
from expflow.spec.model import MAPPING, Number, ObjectNode, scalar_text, to_python

log = logging.getLogger(__name__)

MANIFEST_NAME = "plugin.yml"
PLUGIN_PATH_ENV = "EXPFLOW_PLUGIN_PATH"
BUILTIN_ORIGIN = "expflow"

# behaviour kinds the core knows how to drive
BEHAVIOR_KINDS = frozenset({"stage", "pipeline", "environment", "metrics", "webhook", "record"})
FIELD_KINDS = frozenset({"any", "scalar", "string", "number", "bool", "sequence", "mapping"})


@dataclass(frozen=True)
class FieldSpec:
    kind: str
    default: Any = None


@dataclass(frozen=True)
class TypeDescriptor:
    name: str
    required_fields: Mapping[str, str] = field(default_factory=dict)
    optional_fields: Mapping[str, FieldSpec] = field(default_factory=dict)
    behavior_binding: str = "record"

    def __post_init__(self):
        if not self.name:
            raise InvalidDescriptorError("type descriptor needs a name")
        overlap = set(self.required_fields) & set(self.optional_fields)
        if overlap:
            raise InvalidDescriptorError(
                f"type {self.name!r}: fields both required and optional: {', '.join(sorted(overlap))}"
            )
        kinds = list(self.required_fields.values()) + [f.kind for f in self.optional_fields.values()]
        for kind in kinds:
            if kind not in FIELD_KINDS:
                raise InvalidDescriptorError(f"type {self.name!r}: unknown field kind {kind!r}")
        if self.behavior_binding not in BEHAVIOR_KINDS:
            raise UnknownBehaviorBindingError(
                f"type {self.name!r} binds to unknown behaviour {self.behavior_binding!r} "
                f"(known: {', '.join(sorted(BEHAVIOR_KINDS))})"
            )


@dataclass(frozen=True)
class ToolAdapter:
    name: str
    command_template: tuple[str, ...]
    success_codes: frozenset[int] = frozenset({0})
    working_dir: str = "."

    def __post_init__(self):
        if not self.command_template:
            raise InvalidDescriptorError(f"adapter {self.name!r}: command template is empty")
        if not self.success_codes:
            raise InvalidDescriptorError(f"adapter {self.name!r}: success_codes is empty")
        for part in self.command_template:
            try:
                parse_expression(part)
            except ExpressionSyntaxError as exc:
                raise InvalidDescriptorError(f"adapter {self.name!r}: bad template {part!r}: {exc}") from None


@dataclass(frozen=True)
class AdapterResult:
    exit_code: int
    stdout: str
    stderr: str
    success: bool
    argv: tuple[str, ...] = ()


BUILTIN_TYPES = (
    TypeDescriptor(
        "Stage",
        {"script": "sequence"},
        {
            "name": FieldSpec("string"),
            "description": FieldSpec("string"),
            "inputs": FieldSpec("sequence", []),
            "outputs": FieldSpec("sequence", []),
            "params": FieldSpec("mapping", {}),
            "env": FieldSpec("mapping", {}),
            "always_run": FieldSpec("bool", False),
        },
        "stage",
    ),
    TypeDescriptor(
        "Pipeline",
        {"stages": "sequence"},
        {
            "name": FieldSpec("string"),
            "description": FieldSpec("string"),
            "services": FieldSpec("sequence", []),
            "environment": FieldSpec("string"),
        },
        "pipeline",
    ),
    TypeDescriptor(
        "Env",
        {},
        {"name": FieldSpec("string"), "prepare": FieldSpec("sequence", []), "vars": FieldSpec("mapping", {})},
        "environment",
    ),
    TypeDescriptor(
        "MetricsLogger",
        {},
        {"name": FieldSpec("string"), "file": FieldSpec("string", "metrics.jsonl"),
         "inbox": FieldSpec("string", "metrics.inbox")},
        "metrics",
    ),
    TypeDescriptor(
        "WebhookNotifier",
        {"url": "string"},
        {"name": FieldSpec("string"), "events": FieldSpec("sequence"), "timeout": FieldSpec("number")},
        "webhook",
    ),
)


class TypeRegistry:
    """Registry of type descriptors and tool adapters.

    Built once at startup, read-only afterwards. Registrations never
    replace an existing name.
    """

    def __init__(self, builtins: bool = True):
        self.descriptors: dict[str, TypeDescriptor] = {}
        self.origin: dict[str, str] = {}
        self.adapters: dict[str, ToolAdapter] = {}
        self.adapter_origin: dict[str, str] = {}
        if builtins:
            for desc in BUILTIN_TYPES:
                self.register(desc, BUILTIN_ORIGIN)

    def register(self, desc: TypeDescriptor, origin: str) -> "TypeRegistry":
        if desc.name in self.descriptors:
            raise DuplicateTypeError(
                f"type {desc.name!r} from {origin!r} is already registered by {self.origin[desc.name]!r}"
            )
        self.descriptors[desc.name] = desc
        self.origin[desc.name] = origin
        return self

    def register_adapter(self, adapter: ToolAdapter, origin: str) -> "TypeRegistry":
        if adapter.name in self.adapters:
            raise DuplicateTypeError(
                f"adapter {adapter.name!r} from {origin!r} is already registered by {self.adapter_origin[adapter.name]!r}"
            )
        self.adapters[adapter.name] = adapter
        self.adapter_origin[adapter.name] = origin
        return self

    def get(self, name: str) -> TypeDescriptor | None:
        return self.descriptors.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.descriptors

    def names(self) -> list[str]:
        return sorted(self.descriptors)

    def binding(self, tag: str | None) -> str | None:
        desc = self.descriptors.get(tag) if tag else None
        return desc.behavior_binding if desc else None

    def tags_for(self, binding: str) -> set[str]:
        return {n for n, d in self.descriptors.items() if d.behavior_binding == binding}


def register_type(registry: TypeRegistry, desc: TypeDescriptor, origin: str) -> TypeRegistry:
    return registry.register(desc, origin)


# -- manifests -----------------------------------------------------------


def load_manifest(path) -> list[TypeDescriptor | ToolAdapter]:
    """Parse a ``plugin.yml`` into descriptors followed by adapters."""
    from expflow.spec.parser import parse_node

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestFormatError(f"{path}: cannot read manifest: {exc}") from None
    try:
        root = parse_node(text, str(path))
    except ParseError as exc:
        raise ManifestFormatError(f"{path}: {exc}") from None
    if not root.children:
        return []
    data = to_python(root)
    unknown = set(data) - {"name", "description", "version", "types", "adapters"}
    if unknown:
        raise ManifestFormatError(f"{path}: unknown manifest keys: {', '.join(sorted(unknown))}")
    out: list[TypeDescriptor | ToolAdapter] = []
    for entry in _entries(data, "types", path):
        out.append(_descriptor(entry, path))
    for entry in _entries(data, "adapters", path):
        out.append(_adapter(entry, path))
    return out


def _entries(data: dict, key: str, path: Path) -> list[dict]:
    value = data.get(key)
    if value is None:
        return []
    if not isinstance(value, list) or not all(isinstance(e, dict) for e in value):
        raise ManifestFormatError(f"{path}: {key!r} must be a list of mappings")
    return value


def _text(value, what: str, path: Path) -> str:
    if value is None or isinstance(value, (dict, list)):
        raise ManifestFormatError(f"{path}: {what} must be a scalar")
    return scalar_text(value)


def _descriptor(entry: dict, path: Path) -> TypeDescriptor:
    name = _text(entry.get("name"), "type name", path)
    binding = _text(entry.get("binding", "record"), f"type {name!r} binding", path)
    required = entry.get("required") or {}
    optional = entry.get("optional") or {}
    if not isinstance(required, dict) or not isinstance(optional, dict):
        raise ManifestFormatError(f"{path}: type {name!r}: required/optional must be mappings")
    opt: dict[str, FieldSpec] = {}
    for fname, spec in optional.items():
        if isinstance(spec, dict):
            opt[fname] = FieldSpec(_text(spec.get("kind", "any"), "field kind", path), _plain(spec.get("default")))
        else:
            opt[fname] = FieldSpec(_text(spec, "field kind", path))
    req = {fname: _text(kind, "field kind", path) for fname, kind in required.items()}
    try:
        return TypeDescriptor(name, req, opt, binding)
    except UnknownBehaviorBindingError as exc:
        raise UnknownBehaviorBindingError(f"{path}: {exc}") from None
    except InvalidDescriptorError as exc:
        raise ManifestFormatError(f"{path}: {exc}") from None


def _adapter(entry: dict, path: Path) -> ToolAdapter:
    name = _text(entry.get("name"), "adapter name", path)
    command = entry.get("command")
    if not isinstance(command, list) or not command:
        raise ManifestFormatError(f"{path}: adapter {name!r}: command must be a non-empty list")
    codes = entry.get("success_codes", [0])
    if not isinstance(codes, list):
        raise ManifestFormatError(f"{path}: adapter {name!r}: success_codes must be a list")
    try:
        parsed_codes = frozenset(int(_text(c, "success code", path)) for c in codes)
    except ValueError:
        raise ManifestFormatError(f"{path}: adapter {name!r}: success codes must be integers") from None
    working_dir = _text(entry.get("working_dir", "."), "working_dir", path)
    try:
        return ToolAdapter(
            name, tuple(_text(c, "command element", path) for c in command), parsed_codes, working_dir
        )
    except InvalidDescriptorError as exc:
        raise ManifestFormatError(f"{path}: {exc}") from None


def _plain(value):
    if isinstance(value, Number):
        return value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def discover_manifests(search_paths: Iterable[str | os.PathLike]) -> list[Path]:
    """Find ``plugin.yml`` files in the given directories and their children."""
    found: list[Path] = []
    for entry in search_paths:
        if not entry:
            continue
        base = Path(entry)
        if not base.is_dir():
            log.warning("plugin path %s is not a directory; skipped", base)
            continue
        if (base / MANIFEST_NAME).is_file():
            found.append(base / MANIFEST_NAME)
        for child in sorted(base.iterdir()):
            if child.is_dir() and (child / MANIFEST_NAME).is_file():
                found.append(child / MANIFEST_NAME)
    return found


def plugin_search_path(config_paths: Sequence[str] = (), base_dir: str | os.PathLike | None = None,
                       environ: Mapping[str, str] | None = None) -> list[Path]:
    environ = os.environ if environ is None else environ
    paths: list[Path] = []
    for p in config_paths:
        path = Path(p)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        paths.append(path)
    for p in environ.get(PLUGIN_PATH_ENV, "").split(":"):
        if p:
            paths.append(Path(p))
    return paths


def load_plugins(registry: TypeRegistry, manifests: Iterable[Path]) -> TypeRegistry:
    for manifest in manifests:
        origin = str(manifest)
        for item in load_manifest(manifest):
            if isinstance(item, TypeDescriptor):
                registry.register(item, origin)
            else:
                registry.register_adapter(item, origin)
    return registry


def build_registry(config_paths: Sequence[str] = (), base_dir=None, environ=None) -> TypeRegistry:
    registry = TypeRegistry()
    return load_plugins(registry, discover_manifests(plugin_search_path(config_paths, base_dir, environ)))


# -- adapters ------------------------------------------------------------


def render_argv(adapter: ToolAdapter, bindings: Mapping[str, object]) -> list[str]:
    """Interpolate the adapter's argv template; every placeholder must be bound."""
    from expflow.spec.resolver import Scope, interpolate

    scope = Scope(bindings)
    missing = sorted(
        {ph.root for part in adapter.command_template for ph in parse_expression(part).placeholders}
        - set(bindings)
    )
    if missing:
        raise MissingBindingError(f"adapter {adapter.name!r}: unbound placeholder(s): {', '.join(missing)}")
    argv = []
    for part in adapter.command_template:
        try:
            node = interpolate(part, scope)
        except UnknownReferenceError as exc:
            raise MissingBindingError(f"adapter {adapter.name!r}: {exc.message}") from None
        if node.kind != "scalar":
            raise MissingBindingError(f"adapter {adapter.name!r}: {part!r} does not render to a single argument")
        argv.append(scalar_text(node.scalar_value))
    return argv


def invoke_adapter(adapter: ToolAdapter, bindings: Mapping[str, object], cwd=None,
                   env: Mapping[str, str] | None = None, timeout: float | None = None) -> AdapterResult:
    """Run a tool adapter with an argv vector (never through a shell)."""
    argv = render_argv(adapter, bindings)
    workdir = Path(cwd or ".") / adapter.working_dir
    try:
        proc = subprocess.run(
            argv, cwd=workdir, capture_output=True, text=True, timeout=timeout,
            env=None if env is None else {**os.environ, **env},
        )
    except FileNotFoundError:
        raise SpawnError(f"adapter {adapter.name!r}: executable not found: {argv[0]}") from None
    except PermissionError:
        raise SpawnError(f"adapter {adapter.name!r}: cannot execute {argv[0]}") from None
    return AdapterResult(proc.returncode, proc.stdout, proc.stderr, proc.returncode in adapter.success_codes, tuple(argv))


# -- document helpers ----------------------------------------------------


@dataclass(frozen=True)
class BoundObject:
    name: str
    node: ObjectNode
    path: tuple
    binding: str


def iter_bound(objects: Mapping[str, ObjectNode], registry: TypeRegistry,
               bindings: Iterable[str]) -> Iterator[BoundObject]:
    """Yield typed mappings whose tag binds to one of ``bindings``.

    The object name is its explicit ``name`` field, else the mapping key it
    sits under; sequence members without a ``name`` get ``None``.
    """
    wanted = set(bindings)
    for top, root in objects.items():
        for path, node in root.walk((top,)):
            if node.kind != MAPPING or node.type_tag is None:
                continue
            binding = registry.binding(node.type_tag)
            if binding not in wanted:
                continue
            name_node = node.get("name")
            if name_node is not None and name_node.is_scalar and name_node.scalar_value is not None:
                name = scalar_text(name_node.scalar_value)
            elif isinstance(path[-1], str):
                name = path[-1]
            else:
                name = None
            yield BoundObject(name, node, path, binding)
