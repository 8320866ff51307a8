"""Auxiliary services that run alongside a pipeline: metrics and notifications.

Each service owns one worker thread consuming a bounded queue. Producers
only enqueue immutable events, so a slow or dead endpoint never blocks the
pipeline. Delivery is at-most-once.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Mapping, Sequence

from expflow.errors import InvalidMetricError, QueueFullError, ServiceStartError, StopTimeoutError
from expflow.records import format_ts, utc_now

log = logging.getLogger(__name__)

QUEUE_BOUND = 10_000
STOP_DEADLINE = 5.0
RETRY_DELAY = 2.0
MAX_PAYLOAD = 64 * 1024
EVENT_KINDS = ("run_started", "stage_finished", "run_finished", "run_failed")
INBOX_POLL = 0.05

_STOP = object()


@dataclass(frozen=True)
class ServiceSpec:
    name: str
    kind: str
    config: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class MetricsEvent:
    name: str
    step: int
    value: float
    timestamp: datetime = field(default_factory=utc_now)

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise InvalidMetricError("metric name must be a non-empty string")
        if isinstance(self.step, bool) or not isinstance(self.step, int) or self.step < 0:
            raise InvalidMetricError(f"metric {self.name!r}: step must be a non-negative integer")
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise InvalidMetricError(f"metric {self.name!r}: value must be a number")
        if not math.isfinite(self.value):
            raise InvalidMetricError(f"metric {self.name!r}: value must be finite, got {self.value!r}")

    def to_line(self) -> str:
        data = {"name": self.name, "step": self.step, "value": self.value, "ts": format_ts(self.timestamp)}
        return json.dumps(data, separators=(",", ":"))


@dataclass(frozen=True)
class Notification:
    event: str
    run_id: str
    payload: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.event not in EVENT_KINDS:
            raise ValueError(f"unknown notification event {self.event!r}")
        if len(self.body()) > MAX_PAYLOAD:
            raise ValueError("notification body exceeds 64 KiB")

    def body(self) -> bytes:
        data = {"event": self.event, "run_id": self.run_id, "payload": dict(self.payload)}
        return json.dumps(data, separators=(",", ":"), sort_keys=True).encode("utf-8")


@dataclass(frozen=True)
class StopReport:
    service: str
    drained: int
    dropped: int
    error: StopTimeoutError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _note(ctx, message: str) -> None:
    note = getattr(ctx, "note", None)
    if note is not None:
        note(message)
    else:
        log.warning(message)


class Service:
    """Base class: a named worker thread draining a bounded queue."""

    kind = ""

    def __init__(self, spec: ServiceSpec, ctx):
        self.spec = spec
        self.name = spec.name
        self.ctx = ctx
        self.queue: queue.Queue = queue.Queue(maxsize=QUEUE_BOUND)
        self.dropped = 0
        self.handled = 0
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self.setup()
        self._thread = threading.Thread(target=self._loop, name=f"expflow-{self.name}", daemon=True)
        self._thread.start()

    def setup(self) -> None:
        pass

    def submit(self, item) -> None:
        try:
            self.queue.put_nowait(item)
        except queue.Full:
            self.dropped += 1
            _note(self.ctx, f"warning: service {self.name}: queue full, event dropped ({self.dropped} so far)")
            raise QueueFullError(f"service {self.name!r}: queue full") from None

    def _loop(self) -> None:
        while True:
            try:
                item = self.queue.get(timeout=self.poll_interval())
            except queue.Empty:
                self.idle()
                continue
            if item is _STOP:
                self.idle()
                return
            try:
                self.handle(item)
            except Exception as exc:  # a service must never take the run down
                _note(self.ctx, f"warning: service {self.name}: {exc}")
            self.handled += 1

    def poll_interval(self) -> float | None:
        return None

    def idle(self) -> None:
        pass

    def handle(self, item) -> None:
        raise NotImplementedError

    def stop(self, deadline: float = STOP_DEADLINE) -> StopReport:
        before = self.handled
        error = None
        if self._thread is not None:
            end = time.monotonic() + deadline
            while True:
                try:
                    self.queue.put(_STOP, timeout=max(0.0, end - time.monotonic()))
                    break
                except queue.Full:
                    error = StopTimeoutError(f"service {self.name!r} did not drain within {deadline:g}s")
                    break
            if error is None:
                self._thread.join(max(0.0, end - time.monotonic()))
                if self._thread.is_alive():
                    error = StopTimeoutError(f"service {self.name!r} did not drain within {deadline:g}s")
        if error is not None:
            left = self.queue.qsize()
            self.dropped += left
            _note(self.ctx, f"warning: {error}; {left} event(s) abandoned")
        self.teardown()
        return StopReport(self.name, self.handled - before, self.dropped, error)

    def teardown(self) -> None:
        pass


class MetricsLogger(Service):
    """Appends metric events to ``<log_dir>/metrics.jsonl``.

    Stages can report metrics by appending ``{"name", "step", "value"}``
    lines to ``<log_dir>/metrics.inbox``; the worker tails that file.
    """

    kind = "metrics"

    def setup(self) -> None:
        log_dir = Path(self.ctx.log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        self.path = log_dir / str(self.spec.config.get("file") or "metrics.jsonl")
        self.inbox = log_dir / str(self.spec.config.get("inbox") or "metrics.inbox")
        self._out = open(self.path, "a", encoding="utf-8")
        self._inbox_pos = 0
        self._inbox_rest = b""
        self._last_step: dict[str, int] = {}

    def poll_interval(self) -> float:
        return INBOX_POLL

    def handle(self, event: MetricsEvent) -> None:
        last = self._last_step.get(event.name)
        if last is not None and event.step < last:
            _note(self.ctx, f"warning: metric {event.name}: step {event.step} after step {last}")
        self._last_step[event.name] = max(event.step, last if last is not None else event.step)
        self._out.write(event.to_line() + "\n")
        self._out.flush()

    def idle(self) -> None:
        try:
            with open(self.inbox, "rb") as fh:
                fh.seek(self._inbox_pos)
                chunk = fh.read()
        except FileNotFoundError:
            return
        if not chunk:
            return
        self._inbox_pos += len(chunk)
        data = self._inbox_rest + chunk
        *lines, self._inbox_rest = data.split(b"\n")
        for raw in lines:
            if not raw.strip():
                continue
            try:
                item = json.loads(raw)
                event = MetricsEvent(item["name"], item["step"], item["value"])
            except (ValueError, KeyError, TypeError, InvalidMetricError) as exc:
                _note(self.ctx, f"warning: metrics inbox: bad line {raw[:80]!r}: {exc}")
                continue
            self.handle(event)

    def teardown(self) -> None:
        if hasattr(self, "_out"):
            self._out.close()


class WebhookNotifier(Service):
    """POSTs notifications as JSON to a configured URL."""

    kind = "webhook"

    def setup(self) -> None:
        url = self.spec.config.get("url")
        if not isinstance(url, str) or not url.startswith(("http://", "https://")):
            raise ServiceStartError(self.name, f"url must be an http(s) URL, got {url!r}")
        self.url = url
        events = self.spec.config.get("events")
        self.events = set(events) if events else set(EVENT_KINDS)
        self.timeout = float(self.spec.config.get("timeout") or 5)
        self.delivered = 0
        self.failed = 0

    def wants(self, n: Notification) -> bool:
        return n.event in self.events

    def post(self, body: bytes) -> int:
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.status

    def handle(self, n: Notification) -> None:
        body = n.body()
        for attempt in (1, 2):
            try:
                status = self.post(body)
            except urllib.error.HTTPError as exc:
                self.failed += 1
                _note(self.ctx, f"warning: notifier {self.name}: {n.event} rejected with HTTP {exc.code}")
                return
            except (urllib.error.URLError, OSError) as exc:
                if attempt == 1:
                    time.sleep(RETRY_DELAY)
                    continue
                self.failed += 1
                _note(self.ctx, f"warning: notifier {self.name}: {n.event} not delivered: {exc}")
                return
            self.delivered += 1
            _note(self.ctx, f"notifier {self.name}: {n.event} delivered (HTTP {status})")
            return


SERVICE_KINDS: dict[str, Callable[[ServiceSpec, object], Service]] = {
    "metrics": MetricsLogger,
    "webhook": WebhookNotifier,
}


def register_service_kind(kind: str, factory: Callable[[ServiceSpec, object], Service]) -> None:
    SERVICE_KINDS[kind] = factory


class ServiceGroup:
    def __init__(self, ctx=None):
        self.ctx = ctx
        self.services: list[Service] = []
        self.stopped = False
        self.notes: list[str] = []

    def __iter__(self):
        return iter(self.services)

    def __len__(self):
        return len(self.services)

    def of_kind(self, kind: str) -> list[Service]:
        return [s for s in self.services if s.kind == kind]


def start_services(specs: Sequence[ServiceSpec], ctx, factories: Mapping[str, Callable] | None = None) -> ServiceGroup:
    """Start services in declaration order, rolling back on failure."""
    factories = SERVICE_KINDS if factories is None else factories
    for spec in specs:
        if spec.kind not in factories:
            raise ServiceStartError(spec.name, f"unknown service kind {spec.kind!r}")
    group = ServiceGroup(ctx)
    for spec in specs:
        try:
            service = factories[spec.kind](spec, ctx)
            service.start()
        except Exception as exc:
            stop_services(group)
            if isinstance(exc, ServiceStartError):
                raise
            raise ServiceStartError(spec.name, str(exc)) from exc
        group.services.append(service)
    return group


def log_metric(group: ServiceGroup, event: MetricsEvent) -> bool:
    """Queue a metric for every metrics service; True if at least one accepted it."""
    if not isinstance(event, MetricsEvent):
        raise InvalidMetricError("log_metric expects a MetricsEvent")
    loggers = group.of_kind("metrics")
    if not loggers:
        group.notes.append(f"metric {event.name} ignored: no metrics service")
        return False
    for service in loggers:
        service.submit(event)
    return True


def notify(group: ServiceGroup, n: Notification) -> bool:
    """Queue a notification; never raises on delivery problems."""
    notifiers = [s for s in group.of_kind("webhook") if s.wants(n)]
    if not notifiers:
        group.notes.append(f"notification {n.event} skipped: no notifier configured")
        return False
    accepted = False
    for service in notifiers:
        try:
            service.submit(n)
            accepted = True
        except QueueFullError:
            pass
    return accepted


def stop_services(group: ServiceGroup, deadline: float = STOP_DEADLINE) -> list[StopReport]:
    """Stop in reverse start order. A second call returns an empty list."""
    if group.stopped:
        return []
    group.stopped = True
    reports = []
    for service in reversed(group.services):
        reports.append(service.stop(deadline))
    return reports
