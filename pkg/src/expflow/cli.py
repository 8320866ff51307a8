"""Command-line entry point.

Exit codes: 0 success, 1 stage or run failure, 2 specification error,
3 usage error.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from pathlib import Path

from expflow.cache import Cache
from expflow.errors import (
    ExpflowError,
    LedgerError,
    RunError,
    SpecError,
    UnknownPipelineError,
    ValidationError,
)
from expflow.graph import export_dot
from expflow.project import SPEC_FILE, check, load_project, repro, run, workspace_for
from expflow.records import FAILED
from expflow.templates import discover_templates, init_from_template

EXIT_OK = 0
EXIT_RUN = 1
EXIT_SPEC = 2
EXIT_USAGE = 3

_COLORS = {"succeeded": "32", "failed": "31", "skipped-cache": "36", "skipped-upstream-failure": "33",
           "dry-run": "35", "ok": "32", "REPEATABLE": "32", "NOT REPEATABLE": "31"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Output:
    def __init__(self, quiet: bool = False, stdout=None, stderr=None):
        self.quiet = quiet
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.color = hasattr(self.stdout, "isatty") and self.stdout.isatty() and "NO_COLOR" not in os.environ

    def out(self, text: str = "") -> None:
        if not self.quiet:
            print(text, file=self.stdout)

    def err(self, text: str) -> None:
        print(text, file=self.stderr)

    def paint(self, text: str) -> str:
        code = _COLORS.get(text)
        return f"\033[{code}m{text}\033[0m" if self.color and code else text


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expflow", description="Declarative, reproducible experiment pipelines.")
    parser.add_argument("-f", "--file", help=f"experiment specification (default ./{SPEC_FILE})")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress tables and progress on stdout")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)

    p = sub.add_parser("init", help="create an experiment repository from a template")
    p.add_argument("template", nargs="?", default="template-default")
    p.add_argument("dest", nargs="?")
    p.add_argument("--var", action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--list", action="store_true", help="list available templates")
    p.add_argument("--no-git", action="store_true", help="do not initialize a git repository")

    sub.add_parser("check", help="parse, resolve and validate the specification")

    p = sub.add_parser("run", help="run a pipeline")
    p.add_argument("pipeline")
    p.add_argument("--stage", help="run only this stage and what it depends on")
    p.add_argument("--force", action="store_true", help="run every stage even if up to date")
    p.add_argument("--dry-run", action="store_true", help="show what would run without running it")
    p.add_argument("--no-cache", action="store_true", help="skip cache checks and output snapshots")

    p = sub.add_parser("repro", help="run a pipeline repeatedly from scratch and compare outputs")
    p.add_argument("pipeline")
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--keep", action="store_true", help="keep the scratch workspaces")

    p = sub.add_parser("status", help="show the most recent run")
    p.add_argument("pipeline", nargs="?")

    p = sub.add_parser("graph", help="export the stage graph")
    p.add_argument("--format", choices=["dot"], default="dot")

    p = sub.add_parser("clean", help="remove engine metadata")
    p.add_argument("--cache", action="store_true", help="remove the object store")
    p.add_argument("--logs", action="store_true", help="remove run logs")
    return parser


def _spec_path(args) -> Path:
    return Path(args.file) if args.file else Path(SPEC_FILE)


def _print_diagnostics(out: Output, diagnostics, source) -> None:
    for d in diagnostics:
        out.err(d.format(source))


def _parse_vars(pairs) -> dict[str, str]:
    values = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            raise UsageError(f"--var expects NAME=VALUE, got {pair!r}")
        values[name] = value
    return values


def cmd_init(args, out: Output) -> int:
    if args.list:
        manifests, warnings = discover_templates()
        for w in warnings:
            out.err(f"warning: {w}")
        for m in manifests:
            out.out(f"{m.name}\t{m.description}")
        return EXIT_OK
    if not args.dest:
        raise UsageError("init: missing destination directory")
    report = init_from_template(args.template, args.dest, _parse_vars(args.var), vcs=not args.no_git)
    for note in report.notes:
        out.err(f"note: {note}")
    out.out(f"created {report.dest} from {report.template}:")
    for f in report.files:
        out.out(f"  {f}")
    return EXIT_OK


def cmd_check(args, out: Output) -> int:
    spec = _spec_path(args)
    project = load_project(spec)
    diagnostics = check(project)
    _print_diagnostics(out, diagnostics, str(spec))
    if any(d.severity == "error" for d in diagnostics):
        return EXIT_SPEC
    out.out(f"OK: {len(project.forest.stages)} stages, {len(project.forest.pipelines)} pipelines")
    return EXIT_OK


def _table(out: Output, rows) -> None:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for row in rows:
        cells = [str(c).ljust(w) for c, w in zip(row, widths)]
        cells[1] = out.paint(str(row[1])) + " " * (widths[1] - len(str(row[1])))
        out.out("  ".join(cells).rstrip())


def _results_table(out: Output, results) -> None:
    rows = [("STAGE", "STATUS", "EXIT", "TIME")]
    for r in results:
        exit_code = "" if r.exit_code is None else r.exit_code
        rows.append((r.stage, r.status, exit_code, f"{r.wall_time:.2f}s"))
    _table(out, rows)


def cmd_run(args, out: Output) -> int:
    spec = _spec_path(args)
    project = load_project(spec)
    outcome = run(project, args.pipeline, stage=args.stage, force=args.force, dry_run=args.dry_run,
                  use_cache=not args.no_cache)
    for w in outcome.plan.warnings:
        out.err(w.format(str(spec)))
    record = outcome.record
    out.out(f"run {record.run_id} ({record.pipeline})")
    _results_table(out, record.stage_results)
    for note in outcome.context.notes:
        if note.startswith("warning:"):
            out.err(note)
    for r in record.stage_results:
        if r.status == FAILED:
            reason = r.note or f"exit code {r.exit_code}"
            out.err(f"stage {r.stage} failed ({reason}); log: {r.log_path}")
    out.out(f"status: {out.paint(record.status)}")
    return EXIT_OK if record.status == "ok" else EXIT_RUN


def cmd_repro(args, out: Output) -> int:
    if args.runs < 2:
        raise UsageError("repro: --runs must be at least 2")
    project = load_project(_spec_path(args))
    report, records = repro(project, args.pipeline, args.runs, keep=args.keep)
    for i, record in enumerate(records, 1):
        out.out(f"run {i}: {record.run_id} {out.paint(record.status)}")
    out.out(report.format())
    failed = [r for r in records if r.status != "ok"]
    for r in failed:
        out.err(f"run {r.run_id} failed; outputs cannot be trusted")
    return EXIT_OK if report.repeatable and not failed else EXIT_RUN


def _workspace(args) -> Path:
    return workspace_for(_spec_path(args))


def cmd_status(args, out: Output) -> int:
    cache = Cache(_workspace(args))
    try:
        record = cache.ledger.last(args.pipeline)
    except LedgerError as exc:
        out.err(str(exc))
        return EXIT_RUN
    if record is None:
        out.out("no runs recorded")
        return EXIT_OK
    out.out(f"last run: {record.run_id}")
    out.out(f"pipeline: {record.pipeline}")
    out.out(f"status:   {out.paint(record.status)}")
    _results_table(out, record.stage_results)
    return EXIT_OK


def cmd_graph(args, out: Output) -> int:
    project = load_project(_spec_path(args))
    out.out(export_dot(project.forest).rstrip("\n"))
    return EXIT_OK


def cmd_clean(args, out: Output) -> int:
    cache = Cache(_workspace(args))
    targets = []
    if args.logs or not (args.logs or args.cache):
        targets.append(cache.logs_dir)
    if args.cache or not (args.logs or args.cache):
        targets.append(cache.meta / "cache")
    with cache.lock:
        for t in targets:
            if t.exists():
                shutil.rmtree(t)
                out.out(f"removed {t}")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "check": cmd_check,
    "run": cmd_run,
    "repro": cmd_repro,
    "status": cmd_status,
    "graph": cmd_graph,
    "clean": cmd_clean,
}


def main(argv=None, stdout=None, stderr=None) -> int:
    out = Output(stdout=stdout, stderr=stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("expflow: missing command (one of " + ", ".join(COMMANDS) + ")")
    except UsageError as exc:
        out.err(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    out.quiet = args.quiet
    spec = str(_spec_path(args))
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        out.err(str(exc))
        return EXIT_USAGE
    except ValidationError as exc:
        _print_diagnostics(out, exc.diagnostics, exc.source or spec)
        return EXIT_SPEC
    except UnknownPipelineError as exc:
        out.err(f"error: {exc.message}")
        return EXIT_SPEC
    except SpecError as exc:
        where = exc.source or spec
        if exc.span is not None:
            where = f"{where}:{exc.span.line}:{exc.span.column}"
        out.err(f"{where}: error: {exc.message}")
        return EXIT_SPEC
    except FileNotFoundError as exc:
        if not isinstance(exc, RunError):
            out.err(f"error: {exc.filename or exc}: no such file")
            return EXIT_SPEC
        out.err(f"error: {exc}")
        return EXIT_RUN
    except (RunError, ExpflowError) as exc:
        out.err(f"error: {exc}")
        return EXIT_RUN
    except KeyboardInterrupt:
        out.err("interrupted")
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
