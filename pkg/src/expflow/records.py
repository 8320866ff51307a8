"""Per-stage results and run records, plus their ledger encoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

SUCCEEDED = "succeeded"
FAILED = "failed"
SKIPPED_CACHE = "skipped-cache"
SKIPPED_UPSTREAM = "skipped-upstream-failure"
DRY_RUN = "dry-run"
STAGE_STATUSES = (SUCCEEDED, FAILED, SKIPPED_CACHE, SKIPPED_UPSTREAM, DRY_RUN)

RUN_OK = "ok"
RUN_FAILED = "failed"

LEDGER_KEYS = ("run_id", "pipeline", "status", "started", "ended", "spec_digest", "stages")
STAGE_KEYS = ("name", "status", "exit_code", "wall_time", "fingerprint", "log", "outputs")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_ts(ts: datetime | None) -> str | None:
    if ts is None:
        return None
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str | None) -> datetime | None:
    if not text:
        return None
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


@dataclass
class StageResult:
    stage: str
    status: str
    exit_code: int | None = None
    started_at: datetime | None = None
    ended_at: datetime | None = None
    wall_time: float = 0.0
    log_path: str | None = None
    fingerprint: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if self.status not in STAGE_STATUSES:
            raise ValueError(f"unknown stage status {self.status!r}")
        if self.wall_time < 0:
            raise ValueError("wall_time must be non-negative")

    def to_json(self) -> dict:
        return {
            "name": self.stage,
            "status": self.status,
            "exit_code": self.exit_code,
            "wall_time": round(self.wall_time, 6),
            "fingerprint": self.fingerprint,
            "log": self.log_path,
            "outputs": dict(sorted(self.outputs.items())),
        }

    @classmethod
    def from_json(cls, data: dict) -> "StageResult":
        return cls(
            stage=data["name"],
            status=data["status"],
            exit_code=data.get("exit_code"),
            wall_time=float(data.get("wall_time") or 0.0),
            log_path=data.get("log"),
            fingerprint=data.get("fingerprint") or "",
            outputs=dict(data.get("outputs") or {}),
        )


@dataclass
class RunRecord:
    run_id: str
    pipeline: str
    status: str
    stage_results: list[StageResult]
    spec_digest: str
    started: datetime | None = None
    ended: datetime | None = None

    @property
    def output_digests(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for result in self.stage_results:
            out.update(result.outputs)
        return dict(sorted(out.items()))

    def result_for(self, stage: str) -> StageResult | None:
        for result in self.stage_results:
            if result.stage == stage:
                return result
        return None

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "pipeline": self.pipeline,
            "status": self.status,
            "started": format_ts(self.started),
            "ended": format_ts(self.ended),
            "spec_digest": self.spec_digest,
            "stages": [r.to_json() for r in self.stage_results],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        if set(data) != set(LEDGER_KEYS):
            raise ValueError(f"ledger entry has keys {sorted(data)}, expected {sorted(LEDGER_KEYS)}")
        return cls(
            run_id=data["run_id"],
            pipeline=data["pipeline"],
            status=data["status"],
            stage_results=[StageResult.from_json(s) for s in data["stages"]],
            spec_digest=data["spec_digest"],
            started=parse_ts(data.get("started")),
            ended=parse_ts(data.get("ended")),
        )
