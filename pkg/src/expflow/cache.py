"""Content hashing, stage fingerprints, the object store and the run ledger.

Workspace layout::

    .expflow/
      ledger.jsonl                 append-only, one run per line
      lock                         held for the duration of a run
      cache/objects/<d[:2]>/<d[2:]>  content-addressed output snapshots
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from expflow.errors import IoError, LedgerError, LockError, MissingInputError, NotFoundError, PipelineMismatchError
from expflow.records import LEDGER_KEYS, SUCCEEDED, RunRecord
from expflow.spec.model import Number

META_DIR = ".expflow"
COMPONENTS = ("script", "params", "env", "inputs", "environment")
REPEATABLE = "REPEATABLE"
NOT_REPEATABLE = "NOT REPEATABLE"
_CHUNK = 1 << 20


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_files(root: Path) -> list[tuple[str, Path]]:
    """Regular files under ``root`` as (posix relpath, path), following symlinks."""
    files: list[tuple[str, Path]] = []
    seen: set[str] = set()
    for dirpath, dirnames, filenames in os.walk(root, followlinks=True):
        real = os.path.realpath(dirpath)
        if real in seen:
            dirnames[:] = []
            continue
        seen.add(real)
        for name in filenames:
            full = Path(dirpath) / name
            if full.is_file():
                files.append((full.relative_to(root).as_posix(), full))
    files.sort(key=lambda item: item[0])
    return files


def tree_manifest(path) -> bytes:
    root = Path(path)
    lines = [f"{rel}\t{hash_file(full)}\n" for rel, full in _tree_files(root)]
    return "".join(lines).encode("utf-8")


def hash_tree(path) -> str:
    """SHA-256 of a file's bytes, or of a directory's sorted ``relpath\\tdigest\\n`` manifest."""
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"no such file or directory: {p}")
    try:
        if p.is_dir():
            return sha256_bytes(tree_manifest(p))
        return hash_file(p)
    except OSError as exc:
        raise IoError(f"cannot hash {p}: {exc}") from exc


# -- fingerprints ----------------------------------------------------------


def canonical_json(value) -> str:
    """Canonical text for fingerprint components; keys sorted, no whitespace."""
    if isinstance(value, Number):
        return value.canonical
    if value is None or isinstance(value, bool):
        return json.dumps(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, Mapping):
        items = sorted((str(k), v) for k, v in value.items())
        return "{" + ",".join(f"{json.dumps(k, ensure_ascii=False)}:{canonical_json(v)}" for k, v in items) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in value) + "]"
    raise TypeError(f"cannot canonicalize {type(value).__name__}")


@dataclass(frozen=True)
class Fingerprint:
    stage: str
    digest: str
    components: Mapping[str, str]

    @staticmethod
    def combine(components: Mapping[str, str]) -> str:
        manifest = "".join(f"{name}\t{components[name]}\n" for name in COMPONENTS)
        return sha256_bytes(manifest.encode("utf-8"))

    def verify(self) -> bool:
        return self.digest == self.combine(self.components)


def fingerprint_components(stage, env_digest: str, workspace_root=".") -> dict[str, str]:
    root = Path(workspace_root)
    missing = [p for p in stage.inputs if not (root / p).exists()]
    if missing:
        raise MissingInputError(stage.name, missing)
    inputs = "".join(f"{p}\t{hash_tree(root / p)}\n" for p in sorted(stage.inputs))
    texts = {
        "script": canonical_json(list(stage.script)),
        "params": canonical_json(dict(stage.params)),
        "env": canonical_json(dict(stage.env)),
        "inputs": inputs,
        "environment": env_digest,
    }
    return {name: sha256_bytes(texts[name].encode("utf-8")) for name in COMPONENTS}


def fingerprint_stage(stage, env=None, workspace_root=".") -> Fingerprint:
    """Digest of everything that determines a stage's outputs.

    Covers script lines, params and env vars (sorted), the content digest
    of every input and the environment's declaration digest. The pipeline
    the stage is planned in plays no part.
    """
    env_digest = env.declaration_digest if env is not None else ""
    components = fingerprint_components(stage, env_digest, workspace_root)
    return Fingerprint(stage.name, Fingerprint.combine(components), components)


# -- object store ----------------------------------------------------------


@dataclass(frozen=True)
class ArtifactSnapshot:
    path: str
    digest: str
    size: int
    stored_at: str


class ObjectStore:
    def __init__(self, root):
        self.root = Path(root)
        self.created = 0

    def path_for(self, digest: str) -> Path:
        return self.root / digest[:2] / digest[2:]

    def __contains__(self, digest: str) -> bool:
        return self.path_for(digest).is_file()

    def put_bytes(self, data: bytes) -> str:
        digest = sha256_bytes(data)
        target = self.path_for(digest)
        if not target.exists():
            self._write(target, lambda fh: fh.write(data))
        return digest

    def put_file(self, path) -> str:
        digest = hash_file(path)
        target = self.path_for(digest)
        if not target.exists():
            def copy(fh):
                with open(path, "rb") as src:
                    shutil.copyfileobj(src, fh, _CHUNK)
            self._write(target, copy)
        return digest

    def _write(self, target: Path, writer) -> None:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                writer(fh)
            if target.exists():
                os.unlink(tmp)
                return
            os.replace(tmp, target)
            self.created += 1
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def snapshot_outputs(stage, workspace_root, store: ObjectStore) -> list[ArtifactSnapshot]:
    """Copy each declared output into the store; identical content is stored once."""
    root = Path(workspace_root)
    snapshots = []
    for rel in stage.outputs:
        p = root / rel
        if not p.exists():
            raise NotFoundError(f"stage {stage.name!r}: declared output {rel} was not produced")
        try:
            if p.is_dir():
                size = 0
                for _, full in _tree_files(p):
                    store.put_file(full)
                    size += full.stat().st_size
                digest = store.put_bytes(tree_manifest(p))
            else:
                digest = store.put_file(p)
                size = p.stat().st_size
        except OSError as exc:
            raise IoError(f"cannot snapshot {rel}: {exc}") from exc
        snapshots.append(ArtifactSnapshot(rel, digest, size, str(store.path_for(digest))))
    return snapshots


# -- ledger ----------------------------------------------------------------


class Ledger:
    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: RunRecord) -> None:
        data = record.to_json()
        line = json.dumps({k: data[k] for k in LEDGER_KEYS}, ensure_ascii=False, separators=(",", ":"))
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def records(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        out = []
        try:
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        out.append(RunRecord.from_json(json.loads(line)))
                    except (ValueError, KeyError, TypeError) as exc:
                        raise LedgerError(f"{self.path}:{lineno}: corrupt ledger entry: {exc}") from None
        except (OSError, UnicodeDecodeError) as exc:
            raise LedgerError(f"cannot read ledger {self.path}: {exc}") from None
        return out

    def run_ids(self) -> set[str]:
        try:
            return {r.run_id for r in self.records()}
        except LedgerError:
            return set()

    def last(self, pipeline: str | None = None) -> RunRecord | None:
        for record in reversed(self.records()):
            if pipeline is None or record.pipeline == pipeline:
                return record
        return None


def should_skip(stage, fingerprint: Fingerprint, ledger, workspace_root=".") -> tuple[bool, str]:
    """Decide whether ``stage`` can be skipped; returns ``(skip, reason)``.

    ``ledger`` is a :class:`Ledger` or an already-loaded sequence of records.
    """
    if getattr(stage, "always_run", False):
        return False, "always_run is set"
    try:
        records = ledger.records() if isinstance(ledger, Ledger) else list(ledger)
    except LedgerError:
        return False, "ledger unreadable"
    prior = None
    for record in reversed(records):
        result = record.result_for(stage.name)
        if result is not None and result.status == SUCCEEDED:
            prior = result
            break
    if prior is None:
        return False, "no prior record"
    if prior.fingerprint != fingerprint.digest:
        return False, "fingerprint changed"
    root = Path(workspace_root)
    for rel in stage.outputs:
        recorded = prior.outputs.get(rel)
        if recorded is None:
            return False, f"no recorded digest for output {rel}"
        if not (root / rel).exists():
            return False, f"missing output {rel}"
        if hash_tree(root / rel) != recorded:
            return False, f"modified output {rel}"
    return True, "up to date"


# -- locking ---------------------------------------------------------------


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class WorkspaceLock:
    """Exclusive, fail-fast lock file; re-entrant within one instance."""

    def __init__(self, path):
        self.path = Path(path)
        self._depth = 0

    def acquire(self) -> None:
        if self._depth:
            self._depth += 1
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for attempt in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if attempt == 0 and pid and not _pid_alive(pid):
                    self.path.unlink(missing_ok=True)
                    continue
                raise LockError(
                    f"workspace is locked by another expflow process (pid {pid or 'unknown'}); "
                    f"remove {self.path} if that process is gone"
                ) from None
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            self._depth = 1
            return

    def release(self) -> None:
        if not self._depth:
            return
        self._depth -= 1
        if not self._depth:
            self.path.unlink(missing_ok=True)

    @property
    def held(self) -> bool:
        return self._depth > 0

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


class Cache:
    """Handle on a workspace's ``.expflow`` metadata (ledger, store, lock)."""

    def __init__(self, workspace_root):
        self.root = Path(workspace_root)
        self.meta = self.root / META_DIR
        self.ledger = Ledger(self.meta / "ledger.jsonl")
        self.store = ObjectStore(self.meta / "cache" / "objects")
        self.lock = WorkspaceLock(self.meta / "lock")

    @property
    def logs_dir(self) -> Path:
        return self.meta / "logs"

    @property
    def env_dir(self) -> Path:
        return self.meta / "env"


# -- repeatability -----------------------------------------------------------


@dataclass(frozen=True)
class OutputComparison:
    path: str
    status: str  # identical | differs | only-in-one (the missing side has digest None)
    digest_a: str | None
    digest_b: str | None


@dataclass
class ReproReport:
    pipeline: str
    run_a: str
    run_b: str
    spec_digests_equal: bool
    entries: list[OutputComparison] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        shared_ok = all(e.status == "identical" for e in self.entries if e.status in ("identical", "differs"))
        return REPEATABLE if self.spec_digests_equal and shared_ok else NOT_REPEATABLE

    @property
    def repeatable(self) -> bool:
        return self.verdict == REPEATABLE

    def differing(self) -> list[OutputComparison]:
        return [e for e in self.entries if e.status == "differs"]

    def format(self) -> str:
        lines = [f"pipeline {self.pipeline}: {self.run_a} vs {self.run_b}"]
        if not self.spec_digests_equal:
            lines.append("  spec digest differs")
        for e in self.entries:
            if e.status == "differs":
                lines.append(f"  differs    {e.path}  {e.digest_a[:12]} != {e.digest_b[:12]}")
            elif e.status == "identical":
                lines.append(f"  identical  {e.path}  {e.digest_a[:12]}")
            else:
                side = self.run_a if e.digest_a is not None else self.run_b
                lines.append(f"  only-in-one {e.path}  (only in {side})")
        lines.append(self.verdict)
        return "\n".join(lines)


def compare_runs(run_a: RunRecord, run_b: RunRecord) -> ReproReport:
    if run_a.pipeline != run_b.pipeline:
        raise PipelineMismatchError(
            f"cannot compare runs of different pipelines ({run_a.pipeline!r} vs {run_b.pipeline!r})"
        )
    a, b = run_a.output_digests, run_b.output_digests
    entries = []
    for path in sorted(set(a) | set(b)):
        da, db = a.get(path), b.get(path)
        if da is None or db is None:
            status = "only-in-one"
        else:
            status = "identical" if da == db else "differs"
        entries.append(OutputComparison(path, status, da, db))
    return ReproReport(run_a.pipeline, run_a.run_id, run_b.run_id, run_a.spec_digest == run_b.spec_digest, entries)


def prune_paths(root, paths: Iterable[str]) -> None:
    """Remove the given workspace-relative files or directories if present."""
    for rel in paths:
        p = Path(root) / rel
        if p.is_dir() and not p.is_symlink():
            shutil.rmtree(p)
        elif p.exists() or p.is_symlink():
            p.unlink()


def digests_of(paths: Sequence[str], workspace_root) -> dict[str, str]:
    root = Path(workspace_root)
    return {p: hash_tree(root / p) for p in paths}
