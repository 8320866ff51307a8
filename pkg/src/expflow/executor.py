"""Environment preparation, stage execution and pipeline runs."""

from __future__ import annotations

import os
import secrets
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Mapping, Sequence

from expflow.cache import (
    Cache,
    Fingerprint,
    canonical_json,
    digests_of,
    fingerprint_stage,
    sha256_bytes,
    should_skip,
    snapshot_outputs,
)
from expflow.errors import (
    EnvPrepareError,
    ExpflowError,
    IoError,
    LedgerError,
    MissingInputError,
    NotFoundError,
    SpawnError,
)
from expflow.graph import ExecutionPlan, Polyforest, Stage
from expflow.records import (
    DRY_RUN,
    FAILED,
    RUN_FAILED,
    RUN_OK,
    SKIPPED_CACHE,
    SKIPPED_UPSTREAM,
    SUCCEEDED,
    RunRecord,
    StageResult,
    format_ts,
    utc_now,
)
from expflow.services import (
    Notification,
    ServiceGroup,
    ServiceSpec,
    notify,
    start_services,
    stop_services,
)

ENV_MARKER = ".expflow-env"
RUN_LOG = "run.log"


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str = "default"
    prepare: tuple[str, ...] = ()
    env_vars: Mapping[str, str] = field(default_factory=dict, hash=False)

    @property
    def declaration_digest(self) -> str:
        text = canonical_json({"prepare": list(self.prepare), "vars": dict(self.env_vars)})
        return sha256_bytes(text.encode("utf-8"))


@dataclass(frozen=True)
class EnvReady:
    name: str
    digest: str
    prepared: bool  # False when the marker already matched


def new_run_id(now=None) -> str:
    now = now or utc_now()
    return now.strftime("%Y%m%dT%H%M%SZ") + "-" + secrets.token_hex(2)


@dataclass
class RunContext:
    run_id: str
    workspace_root: Path
    log_dir: Path
    dry_run: bool = False
    force: bool = False
    env: EnvironmentSpec = field(default_factory=EnvironmentSpec)
    use_cache: bool = True
    base_env: Mapping[str, str] = field(default_factory=dict)
    spawn_count: int = 0
    notes: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def create(cls, workspace_root, run_id: str | None = None, existing_ids=(), **kwargs) -> "RunContext":
        root = Path(workspace_root).resolve()
        run_id = run_id or new_run_id()
        while run_id in existing_ids or (root / ".expflow" / "logs" / run_id).exists():
            run_id = new_run_id()
        return cls(run_id, root, root / ".expflow" / "logs" / run_id, **kwargs)

    def note(self, message: str) -> None:
        """Record an engine message in the run log."""
        with self._lock:
            self.notes.append(message)
            try:
                self.log_dir.mkdir(parents=True, exist_ok=True)
                with open(self.log_dir / RUN_LOG, "a", encoding="utf-8") as fh:
                    fh.write(f"{format_ts(utc_now())} {message}\n")
            except OSError:
                pass

    def relative(self, path: Path) -> str:
        try:
            return path.relative_to(self.workspace_root).as_posix()
        except ValueError:
            return str(path)

    def process_env(self, extra: Mapping[str, str] = ()) -> dict[str, str]:
        env = dict(os.environ)
        env.update(self.base_env)
        env.update(self.env.env_vars)
        env.update(extra)
        env.update({
            "EXPFLOW_RUN_ID": self.run_id,
            "EXPFLOW_WORKSPACE": str(self.workspace_root),
            "EXPFLOW_LOG_DIR": str(self.log_dir),
            "EXPFLOW_METRICS_INBOX": str(self.log_dir / "metrics.inbox"),
        })
        return env


# -- subprocesses ------------------------------------------------------------


def _pump(stream: IO[bytes], prefix: bytes, sink: IO[bytes], lock: threading.Lock) -> None:
    for line in iter(stream.readline, b""):
        if not line.endswith(b"\n"):
            line += b"\n"
        with lock:
            sink.write(prefix + line)
            sink.flush()
    stream.close()


def run_command(command: str, cwd: Path, env: Mapping[str, str], sink: IO[bytes], ctx: RunContext) -> int:
    """Run one shell line, streaming prefixed output into ``sink``."""
    lock = threading.Lock()
    with lock:
        sink.write(b"#| $ " + command.encode("utf-8", "replace") + b"\n")
        sink.flush()
    try:
        proc = subprocess.Popen(command, shell=True, cwd=cwd, env=dict(env),
                                stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    except OSError as exc:
        raise SpawnError(f"cannot start {command!r}: {exc}") from exc
    ctx.spawn_count += 1
    readers = [
        threading.Thread(target=_pump, args=(proc.stdout, b"O|", sink, lock), daemon=True),
        threading.Thread(target=_pump, args=(proc.stderr, b"E|", sink, lock), daemon=True),
    ]
    for t in readers:
        t.start()
    code = proc.wait()
    for t in readers:
        t.join()
    with lock:
        sink.write(f"#| exit {code}\n".encode())
        sink.flush()
    return code


# -- environment ---------------------------------------------------------------


def prepare_environment(spec: EnvironmentSpec, ctx: RunContext) -> EnvReady:
    """Run the environment's prepare commands unless its marker is current."""
    digest = spec.declaration_digest
    if ctx.dry_run:
        ctx.note(f"environment {spec.name}: dry run, preparation not performed")
        return EnvReady(spec.name, digest, False)
    env_dir = ctx.workspace_root / ".expflow" / "env" / spec.name
    marker = env_dir / ENV_MARKER
    try:
        if marker.read_text(encoding="utf-8").strip() == digest:
            return EnvReady(spec.name, digest, False)
    except OSError:
        pass
    env_dir.mkdir(parents=True, exist_ok=True)
    if marker.exists():
        marker.unlink()
    log_path = ctx.log_dir / f"env-{spec.name}.log"
    if spec.prepare:
        ctx.log_dir.mkdir(parents=True, exist_ok=True)
        env = ctx.process_env({**spec.env_vars, "EXPFLOW_ENV_DIR": str(env_dir)})
        with open(log_path, "ab") as sink:
            for command in spec.prepare:
                code = run_command(command, env_dir, env, sink, ctx)
                if code != 0:
                    raise EnvPrepareError(
                        f"environment {spec.name}: prepare command {command!r} exited {code} "
                        f"(see {ctx.relative(log_path)})",
                        log_path,
                    )
    marker.write_text(digest + "\n", encoding="utf-8")
    ctx.note(f"environment {spec.name}: prepared ({len(spec.prepare)} command(s))")
    return EnvReady(spec.name, digest, True)


# -- stages ------------------------------------------------------------------


def execute_stage(stage: Stage, ctx: RunContext, fingerprint: Fingerprint | None = None) -> StageResult:
    """Run a stage's script lines in order, stopping at the first failure."""
    fp = fingerprint.digest if fingerprint is not None else ""
    log_path = ctx.log_dir / f"{stage.name}.log"
    if ctx.dry_run:
        ctx.note(f"dry run: stage {stage.name} would run {len(stage.script)} command(s)")
        return StageResult(stage.name, DRY_RUN, fingerprint=fp, note="dry run")
    missing = [p for p in stage.inputs if not (ctx.workspace_root / p).exists()]
    if missing:
        raise MissingInputError(stage.name, missing)
    ctx.log_dir.mkdir(parents=True, exist_ok=True)
    env = ctx.process_env({**stage.env, "EXPFLOW_STAGE": stage.name})
    started = utc_now()
    t0 = time.perf_counter()
    code = 0
    with open(log_path, "ab") as sink:
        for command in stage.script:
            code = run_command(command, ctx.workspace_root, env, sink, ctx)
            if code != 0:
                break
    wall = time.perf_counter() - t0
    status = SUCCEEDED if code == 0 else FAILED
    return StageResult(stage.name, status, code, started, utc_now(), wall, ctx.relative(log_path), fp)


def _failed(stage: Stage, ctx: RunContext, fp: str, reason: str) -> StageResult:
    now = utc_now()
    log_path = ctx.log_dir / f"{stage.name}.log"
    try:
        ctx.log_dir.mkdir(parents=True, exist_ok=True)
        with open(log_path, "ab") as sink:
            sink.write(b"#| " + reason.encode("utf-8", "replace") + b"\n")
    except OSError:
        pass
    return StageResult(stage.name, FAILED, None, now, now, 0.0, ctx.relative(log_path), fp, note=reason)


def run_pipeline(plan: ExecutionPlan, ctx: RunContext, forest: Polyforest, cache: Cache | None = None,
                 services: Sequence[ServiceSpec] = (), spec_digest: str = "",
                 service_factories=None, on_stage=None) -> RunRecord:
    """Execute a plan and append the outcome to the ledger.

    Services start before the first stage and are always stopped. The
    first failing stage ends the run; every later stage is recorded as
    skipped. ``on_stage`` is called with each StageResult as it settles.
    """
    cache = cache or Cache(ctx.workspace_root)
    records = []
    if not ctx.dry_run:
        cache.lock.acquire()
    try:
        if not ctx.dry_run:
            try:
                records = cache.ledger.records()
            except LedgerError as exc:
                ctx.note(f"warning: {exc}; no stage will be skipped")
                records = cache.ledger  # should_skip reports it as unreadable
        started = utc_now()
        ctx.note(f"run {ctx.run_id}: pipeline {plan.pipeline}, stages {', '.join(plan.ordered_stages)}")
        group = ServiceGroup(ctx) if ctx.dry_run else start_services(services, ctx, service_factories)
        results: list[StageResult] = []
        try:
            notify(group, Notification("run_started", ctx.run_id, {"pipeline": plan.pipeline}))
            failed_at = None
            for name in plan.ordered_stages:
                stage = forest.stages[name]
                if failed_at is not None:
                    result = StageResult(name, SKIPPED_UPSTREAM, note=f"stage {failed_at} failed")
                else:
                    result = _run_one(stage, ctx, cache, records)
                    if result.status == FAILED:
                        failed_at = name
                results.append(result)
                notify(group, Notification("stage_finished", ctx.run_id,
                                           {"stage": name, "status": result.status}))
                if on_stage is not None:
                    on_stage(result)
            status = RUN_FAILED if failed_at is not None else RUN_OK
            event = "run_failed" if failed_at is not None else "run_finished"
            notify(group, Notification(event, ctx.run_id, {"pipeline": plan.pipeline, "status": status}))
        finally:
            for report in stop_services(group):
                if report.error is not None:
                    ctx.note(f"warning: {report.error}")
        record = RunRecord(ctx.run_id, plan.pipeline, status, results, spec_digest, started, utc_now())
        if not ctx.dry_run:
            cache.ledger.append(record)
        ctx.note(f"run {ctx.run_id}: {status}")
        return record
    finally:
        if not ctx.dry_run:
            cache.lock.release()


def _run_one(stage: Stage, ctx: RunContext, cache: Cache, records) -> StageResult:
    if ctx.dry_run:
        try:
            fp = fingerprint_stage(stage, ctx.env, ctx.workspace_root).digest
        except (MissingInputError, NotFoundError, IoError):
            fp = ""
        return StageResult(stage.name, DRY_RUN, fingerprint=fp, note="dry run")
    try:
        fingerprint = fingerprint_stage(stage, ctx.env, ctx.workspace_root)
    except MissingInputError as exc:
        ctx.note(f"stage {stage.name}: {exc}")
        return _failed(stage, ctx, "", str(exc))
    if ctx.use_cache and not ctx.force:
        skip, reason = should_skip(stage, fingerprint, records, ctx.workspace_root)
        if skip:
            outputs = digests_of(stage.outputs, ctx.workspace_root)
            return StageResult(stage.name, SKIPPED_CACHE, fingerprint=fingerprint.digest, outputs=outputs,
                               note=reason)
        ctx.note(f"stage {stage.name}: running ({reason})")
    try:
        result = execute_stage(stage, ctx, fingerprint)
    except (MissingInputError, SpawnError) as exc:
        return _failed(stage, ctx, fingerprint.digest, str(exc))
    if result.status != SUCCEEDED:
        ctx.note(f"stage {stage.name}: failed with exit code {result.exit_code}, log {result.log_path}")
        return result
    missing = [p for p in stage.outputs if not (ctx.workspace_root / p).exists()]
    if missing:
        result.status = FAILED
        result.note = "declared output(s) not produced: " + ", ".join(missing)
        ctx.note(f"stage {stage.name}: {result.note}")
        return result
    try:
        if ctx.use_cache:
            snaps = snapshot_outputs(stage, ctx.workspace_root, cache.store)
            result.outputs = {s.path: s.digest for s in snaps if s.path in stage.outputs}
        else:
            result.outputs = digests_of(stage.outputs, ctx.workspace_root)
    except ExpflowError as exc:
        result.status = FAILED
        result.note = f"cannot record outputs: {exc}"
        ctx.note(f"stage {stage.name}: {result.note}")
    return result
