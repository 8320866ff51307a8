from __future__ import annotations

import os
import re

import pytest

from expflow.cache import Cache
from expflow.errors import EnvPrepareError, MissingInputError
from expflow.executor import (
    EnvironmentSpec,
    RunContext,
    execute_stage,
    new_run_id,
    prepare_environment,
    run_pipeline,
)
from expflow.graph import Pipeline, Stage, make_forest, plan
from expflow.records import DRY_RUN, FAILED, SKIPPED_CACHE, SKIPPED_UPSTREAM, SUCCEEDED
from expflow.services import Service, ServiceSpec


def ctx_for(root, **kwargs):
    return RunContext.create(root, **kwargs)


def snapshot_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        if os.path.relpath(dirpath, root).startswith(os.path.join(".expflow", "logs")):
            continue
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_run_id_format():
    assert re.fullmatch(r"\d{8}T\d{6}Z-[0-9a-f]{4}", new_run_id())


def test_run_ids_are_unique_per_workspace(tmp_path):
    a = ctx_for(tmp_path, run_id="20260101T000000Z-aaaa")
    a.log_dir.mkdir(parents=True)
    b = ctx_for(tmp_path, run_id="20260101T000000Z-aaaa")
    assert a.run_id != b.run_id and a.log_dir != b.log_dir


class TestEnvironment:
    def test_empty_prepare_writes_marker(self, tmp_path):
        ctx = ctx_for(tmp_path)
        ready = prepare_environment(EnvironmentSpec("e"), ctx)
        assert ready.prepared and ctx.spawn_count == 0
        marker = tmp_path / ".expflow" / "env" / "e" / ".expflow-env"
        assert marker.read_text().strip() == EnvironmentSpec("e").declaration_digest

    def test_second_prepare_spawns_nothing(self, tmp_path):
        spec = EnvironmentSpec("e", ("echo installing > installed.txt",), {"X": "1"})
        ctx = ctx_for(tmp_path)
        prepare_environment(spec, ctx)
        assert ctx.spawn_count == 1
        assert (tmp_path / ".expflow" / "env" / "e" / "installed.txt").exists()
        again = ctx_for(tmp_path)
        assert not prepare_environment(spec, again).prepared
        assert again.spawn_count == 0

    def test_changed_declaration_reprepares(self, tmp_path):
        prepare_environment(EnvironmentSpec("e", ("true",)), ctx_for(tmp_path))
        ctx = ctx_for(tmp_path)
        assert prepare_environment(EnvironmentSpec("e", ("true", "true")), ctx).prepared
        assert ctx.spawn_count == 2

    def test_failure_leaves_no_marker(self, tmp_path):
        ctx = ctx_for(tmp_path)
        with pytest.raises(EnvPrepareError) as info:
            prepare_environment(EnvironmentSpec("e", ("exit 1",)), ctx)
        assert not (tmp_path / ".expflow" / "env" / "e" / ".expflow-env").exists()
        assert info.value.log_path.exists()

    def test_env_vars_are_visible(self, tmp_path):
        spec = EnvironmentSpec("e", ('echo "$GREETING" > out.txt',), {"GREETING": "hello"})
        prepare_environment(spec, ctx_for(tmp_path))
        assert (tmp_path / ".expflow" / "env" / "e" / "out.txt").read_text() == "hello\n"

    def test_digest_is_recomputable(self):
        a = EnvironmentSpec("x", ("a",), {"K": "v"})
        assert a.declaration_digest == EnvironmentSpec("x", ("a",), {"K": "v"}).declaration_digest
        assert a.declaration_digest != EnvironmentSpec("x", ("a",), {"K": "w"}).declaration_digest


class TestExecuteStage:
    def test_redirected_output(self, tmp_path):
        ctx = ctx_for(tmp_path)
        result = execute_stage(Stage("s", ("echo hello > out.txt",), (), ("out.txt",)), ctx)
        assert result.status == SUCCEEDED and result.exit_code == 0
        assert (tmp_path / "out.txt").read_text() == "hello\n"

    def test_log_prefixes(self, tmp_path):
        ctx = ctx_for(tmp_path)
        result = execute_stage(Stage("s", ("echo hello", "echo oops >&2")), ctx)
        log = (tmp_path / result.log_path).read_text().splitlines()
        assert "O|hello" in log and "E|oops" in log
        assert result.log_path == f".expflow/logs/{ctx.run_id}/s.log"

    def test_stop_at_first_failure(self, tmp_path):
        ctx = ctx_for(tmp_path)
        result = execute_stage(Stage("s", ("true", "false", "touch third")), ctx)
        assert (result.status, result.exit_code) == (FAILED, 1)
        assert ctx.spawn_count == 2
        assert not (tmp_path / "third").exists()

    def test_missing_input(self, tmp_path):
        with pytest.raises(MissingInputError):
            execute_stage(Stage("s", ("true",), ("absent.txt",)), ctx_for(tmp_path))

    def test_dry_run_spawns_and_writes_nothing(self, tmp_path):
        (tmp_path / "keep").write_text("x")
        before = snapshot_tree(tmp_path)
        ctx = ctx_for(tmp_path, dry_run=True)
        result = execute_stage(Stage("s", ("touch made",), (), ("made",)), ctx)
        assert result.status == DRY_RUN and result.exit_code is None
        assert ctx.spawn_count == 0
        assert snapshot_tree(tmp_path) == before

    def test_stage_env_overlays_environment(self, tmp_path):
        ctx = ctx_for(tmp_path, env=EnvironmentSpec("e", (), {"A": "env", "B": "env"}))
        stage = Stage("s", ('echo "$A $B $EXPFLOW_STAGE" > out.txt',), env={"B": "stage"})
        execute_stage(stage, ctx)
        assert (tmp_path / "out.txt").read_text() == "env stage s\n"

    def test_runs_in_workspace_root(self, tmp_path):
        execute_stage(Stage("s", ("pwd > where.txt",)), ctx_for(tmp_path))
        assert (tmp_path / "where.txt").read_text().strip() == str(tmp_path.resolve())


def chain(root, middle="cp a.txt b.txt"):
    stages = [
        Stage("first", ("echo a > a.txt",), (), ("a.txt",)),
        Stage("middle", (middle,), ("a.txt",), ("b.txt",)),
        Stage("last", ("cp b.txt c.txt",), ("b.txt",), ("c.txt",)),
    ]
    forest = make_forest(stages, [Pipeline("main", ("first", "middle", "last"))])
    return forest, plan(forest, "main")


def statuses(record):
    return [r.status for r in record.stage_results]


class TestRunPipeline:
    def test_all_succeed_then_all_skip(self, tmp_path):
        forest, p = chain(tmp_path)
        first = run_pipeline(p, ctx_for(tmp_path), forest)
        assert first.status == "ok" and statuses(first) == [SUCCEEDED] * 3
        assert set(first.output_digests) == {"a.txt", "b.txt", "c.txt"}
        ctx = ctx_for(tmp_path)
        second = run_pipeline(p, ctx, forest)
        assert statuses(second) == [SKIPPED_CACHE] * 3 and ctx.spawn_count == 0
        assert [r.run_id for r in Cache(tmp_path).ledger.records()] == [first.run_id, second.run_id]

    def test_middle_failure(self, tmp_path):
        forest, p = chain(tmp_path, middle="exit 4")
        record = run_pipeline(p, ctx_for(tmp_path), forest)
        assert record.status == "failed"
        assert statuses(record) == [SUCCEEDED, FAILED, SKIPPED_UPSTREAM]
        assert record.stage_results[1].exit_code == 4
        assert record.stage_results[2].exit_code is None

    def test_force_reruns(self, tmp_path):
        forest, p = chain(tmp_path)
        run_pipeline(p, ctx_for(tmp_path), forest)
        ctx = ctx_for(tmp_path, force=True)
        assert statuses(run_pipeline(p, ctx, forest)) == [SUCCEEDED] * 3
        assert ctx.spawn_count == 3

    def test_no_cache_reruns_without_snapshots(self, tmp_path):
        forest, p = chain(tmp_path)
        ctx = ctx_for(tmp_path, use_cache=False)
        record = run_pipeline(p, ctx, forest)
        assert statuses(record) == [SUCCEEDED] * 3
        assert not (tmp_path / ".expflow" / "cache").exists()
        assert record.output_digests["a.txt"]

    def test_always_run_bypasses_only_the_cache(self, tmp_path):
        stages = [Stage("s", ("date +%s%N > t.txt",), (), ("t.txt",), always_run=True)]
        forest = make_forest(stages, [Pipeline("p", ("s",))])
        run_pipeline(plan(forest, "p"), ctx_for(tmp_path), forest)
        assert statuses(run_pipeline(plan(forest, "p"), ctx_for(tmp_path), forest)) == [SUCCEEDED]

    def test_missing_declared_output_fails_the_stage(self, tmp_path):
        forest = make_forest([Stage("s", ("true",), (), ("never.txt",))], [Pipeline("p", ("s",))])
        record = run_pipeline(plan(forest, "p"), ctx_for(tmp_path), forest)
        assert record.status == "failed" and "never.txt" in record.stage_results[0].note

    def test_missing_input_fails_the_run(self, tmp_path):
        forest = make_forest([Stage("s", ("true",), ("ghost.txt",))], [Pipeline("p", ("s",))])
        record = run_pipeline(plan(forest, "p"), ctx_for(tmp_path), forest)
        assert statuses(record) == [FAILED]
        assert "ghost.txt" in record.stage_results[0].note

    def test_dry_run_is_pure(self, tmp_path):
        forest, p = chain(tmp_path)
        before = snapshot_tree(tmp_path)
        ctx = ctx_for(tmp_path, dry_run=True)
        record = run_pipeline(p, ctx, forest)
        assert statuses(record) == [DRY_RUN] * 3 and ctx.spawn_count == 0
        assert snapshot_tree(tmp_path) == before

    def test_ledger_prefix_is_preserved(self, tmp_path):
        forest, p = chain(tmp_path)
        run_pipeline(p, ctx_for(tmp_path), forest)
        ledger = tmp_path / ".expflow" / "ledger.jsonl"
        before = ledger.read_bytes()
        run_pipeline(p, ctx_for(tmp_path, force=True), forest)
        assert ledger.read_bytes().startswith(before) and len(ledger.read_bytes()) > len(before)


class CountingService(Service):
    kind = "counting"
    starts = 0
    stops = 0
    fail_start = False

    def setup(self):
        if CountingService.fail_start:
            raise RuntimeError("refusing to start")
        CountingService.starts += 1

    def handle(self, item):
        pass

    def teardown(self):
        CountingService.stops += 1


@pytest.mark.parametrize("middle", ["cp a.txt b.txt", "exit 1"])
def test_services_are_always_stopped(tmp_path, middle):
    CountingService.starts = CountingService.stops = 0
    CountingService.fail_start = False
    forest, p = chain(tmp_path, middle)
    specs = [ServiceSpec("one", "counting"), ServiceSpec("two", "counting")]
    run_pipeline(p, ctx_for(tmp_path), forest, services=specs, service_factories={"counting": CountingService})
    assert CountingService.starts == CountingService.stops == 2


def test_service_start_failure_aborts_before_stages(tmp_path):
    from expflow.errors import ServiceStartError

    CountingService.starts = CountingService.stops = 0
    CountingService.fail_start = True
    forest, p = chain(tmp_path)
    with pytest.raises(ServiceStartError):
        run_pipeline(p, ctx_for(tmp_path), forest, services=[ServiceSpec("x", "counting")],
                     service_factories={"counting": CountingService})
    CountingService.fail_start = False
    assert not (tmp_path / "a.txt").exists()
    assert not (tmp_path / ".expflow" / "lock").exists()
