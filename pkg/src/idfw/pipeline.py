"""Event loop tying the modules together.

Events from any source are queued; one worker thread owns the identity
table, the correlation engine and the recompiler. Each event (or batch,
when a batch window is set) that changes state causes exactly one
compile + install.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable, Iterable

from .backend import FirewallBackend, write_rule_file
from .compiler import ConcreteRuleset, Recompiler
from .config import PipelineConfig
from .correlation import BlockChange, CorrelationEngine, CorrelationRule, load_correlation_file
from .events import (
    DEFAULT_ID_MAP,
    DEFAULT_PATTERNS,
    EventIdMap,
    EventKind,
    SessionEvent,
    SyslogListener,
    SyslogPattern,
    read_replay,
)
from .identity import DEFAULT_LEASE, IdentityTable
from .policy import MetaPolicy, load_meta_policy

logger = logging.getLogger(__name__)

_STOP = object()


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class PipelineStats:
    events: int = 0
    installs: int = 0
    errors: int = 0
    sweeps: int = 0


@dataclass(frozen=True)
class _PolicyReload:
    version: int

    def __bool__(self) -> bool:
        return True


class Pipeline:
    def __init__(
        self,
        policy: MetaPolicy,
        correlation_rules: Iterable[CorrelationRule] = (),
        *,
        lease: timedelta = DEFAULT_LEASE,
        sweep_interval: timedelta = timedelta(seconds=30),
        batch_window: timedelta = timedelta(0),
        rule_file=None,
        id_map: EventIdMap = DEFAULT_ID_MAP,
        syslog_bind: tuple[str, int] | None = None,
        syslog_patterns: Iterable[SyslogPattern] = DEFAULT_PATTERNS,
        replay_path=None,
        clock: Callable[[], datetime] = utcnow,
    ):
        self.policy = policy
        self.table = IdentityTable(lease)
        self.correlation = CorrelationEngine(correlation_rules)
        self.recompiler = Recompiler()
        self.backend = FirewallBackend(rule_file)
        self.clock = clock
        self.sweep_interval = sweep_interval
        self.batch_window = batch_window
        # pass through any event ids the correlation rules care about
        self.id_map = id_map.with_system(self.correlation.event_ids)
        self.syslog_bind = syslog_bind
        self.syslog_patterns = tuple(syslog_patterns)
        self.replay_path = replay_path
        self.stats = PipelineStats()

        self._queue: queue.Queue = queue.Queue()
        self._worker: threading.Thread | None = None
        self._replay_thread: threading.Thread | None = None
        self.listener: SyslogListener | None = None

        # baseline ruleset so queries work before the first event
        self._install(self.recompiler.recompile_on_change(True, policy, self.table.snapshot(), ()))
        self.stats.installs = 0

    @classmethod
    def from_config(cls, config: PipelineConfig, **kwargs) -> "Pipeline":
        config.validate()
        policy = load_meta_policy(config.policy_path)
        rules = load_correlation_file(config.correlation_path) if config.correlation_path else ()
        return cls(
            policy,
            rules,
            lease=config.lease,
            sweep_interval=config.sweep_interval,
            batch_window=config.batch_window,
            rule_file=config.rule_file,
            id_map=config.id_map,
            syslog_bind=config.syslog_bind,
            syslog_patterns=config.syslog_patterns,
            replay_path=config.replay_path,
            **kwargs,
        )

    # synchronous core; only the worker thread (or a test) calls these

    def _install(self, ruleset: ConcreteRuleset | None) -> ConcreteRuleset | None:
        if ruleset is not None:
            self.backend.install(ruleset)
            self.stats.installs += 1
        return ruleset

    def _recompile(self, change, now: datetime) -> ConcreteRuleset | None:
        ruleset = self.recompiler.recompile_on_change(
            change, self.policy, self.table.snapshot(), self.correlation.active_blocks(now)
        )
        return self._install(ruleset)

    def process_many(self, events: Iterable[SessionEvent], now: datetime | None = None) -> ConcreteRuleset | None:
        """Apply ``events`` and install at most one new ruleset for all of them."""
        now = now or self.clock()
        changed = False
        for event in events:
            self.stats.events += 1
            if event.kind in (EventKind.LOGIN, EventKind.LOGOFF):
                changed |= bool(self.table.apply_event(event, now))
            changed |= bool(self.correlation.observe(event, now))
        return self._recompile(changed, now)

    def process(self, event: SessionEvent, now: datetime | None = None) -> ConcreteRuleset | None:
        return self.process_many((event,), now)

    def sweep(self, now: datetime | None = None) -> ConcreteRuleset | None:
        """Expire stale leases and blocks; recompile if anything went away."""
        now = now or self.clock()
        self.stats.sweeps += 1
        change = self.table.expire_stale(now)
        expired = BlockChange(expired=tuple(self.correlation.expire(now)))
        if change:
            logger.info("lease expiry removed %d binding(s)", len(change.removed))
        return self._recompile(bool(change) or bool(expired), now)

    def reload_policy(self, policy: MetaPolicy, now: datetime | None = None) -> ConcreteRuleset | None:
        self.policy = policy
        return self._recompile(_PolicyReload(policy.version), now or self.clock())

    # threaded operation

    def submit(self, event: SessionEvent) -> None:
        """Queue an event; safe from any thread."""
        self._queue.put(event)

    def wait_idle(self) -> None:
        """Block until every queued event has been handled."""
        self._queue.join()

    def _collect_batch(self, first) -> tuple[list, bool]:
        batch, stop = [first], False
        deadline = time.monotonic() + self.batch_window.total_seconds()
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                item = self._queue.get(timeout=remaining)
            except queue.Empty:
                break
            if item is _STOP:
                self._queue.task_done()
                stop = True
                break
            batch.append(item)
        return batch, stop

    def _run(self) -> None:
        interval = self.sweep_interval.total_seconds()
        next_sweep = time.monotonic() + interval
        stop = False
        while not stop:
            try:
                item = self._queue.get(timeout=max(0.0, next_sweep - time.monotonic()))
            except queue.Empty:
                item = None
            if item is _STOP:
                self._queue.task_done()
                break
            if item is not None:
                batch = [item]
                if self.batch_window > timedelta(0):
                    batch, stop = self._collect_batch(item)
                try:
                    self.process_many(batch)
                except Exception:
                    self.stats.errors += 1
                    logger.exception("event processing failed")
                finally:
                    for _ in batch:
                        self._queue.task_done()
            if time.monotonic() >= next_sweep:
                try:
                    self.sweep()
                except Exception:
                    self.stats.errors += 1
                    logger.exception("sweep failed")
                next_sweep = time.monotonic() + interval

    def _replay(self) -> None:
        with open(self.replay_path, encoding="utf-8") as fh:
            for event in read_replay(fh, self.id_map):
                self.submit(event)
        logger.info("replay of %s queued", self.replay_path)

    def start(self) -> "Pipeline":
        if self.syslog_bind is not None:
            self.listener = SyslogListener(self.syslog_bind, self.submit, self.syslog_patterns).start()
            logger.info("syslog listening on %s:%d", *self.listener.address)
        self._worker = threading.Thread(target=self._run, name="idfw-pipeline", daemon=True)
        self._worker.start()
        if self.replay_path is not None:
            self._replay_thread = threading.Thread(target=self._replay, name="idfw-replay", daemon=True)
            self._replay_thread.start()
        return self

    def join_replay(self, timeout: float | None = None) -> None:
        if self._replay_thread is not None:
            self._replay_thread.join(timeout)

    def stop(self) -> int:
        """Shut down, flush the rule file, return the final generation."""
        if self.listener is not None:
            self.listener.shutdown()
        if self._worker is not None and self._worker.is_alive():
            self._queue.put(_STOP)
            self._worker.join()
        if self.backend.rule_file is not None and self.backend.ruleset is not None:
            write_rule_file(self.backend.ruleset, self.backend.rule_file, self.clock())
        return self.backend.generation


def run_pipeline(config: PipelineConfig, stop: threading.Event) -> int:
    """Run until ``stop`` is set; returns the final generation."""
    pipeline = Pipeline.from_config(config).start()
    try:
        stop.wait()
    finally:
        generation = pipeline.stop()
    return generation
