"""Event correlation: threshold and multi-step sequence rules keyed by source IP.

A threshold rule fires when N matching events from one address fall inside
a sliding window W (both ends inclusive). A sequence rule fires when its
steps match in order, each within ``max-gap`` of the previous matched step.
Either way the source address is blocked for the rule's block duration.
"""
from __future__ import annotations

import logging
import threading
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from ipaddress import IPv4Address
from typing import Iterable

from .events import EventKind, SessionEvent
from .policy import PolicyValidationError
from .timeutil import parse_duration

logger = logging.getLogger(__name__)

DEFAULT_BLOCK = timedelta(minutes=15)


class CorrelationValidationError(PolicyValidationError):
    pass


class Mode(str, Enum):
    THRESHOLD = "threshold"
    SEQUENCE = "sequence"


@dataclass(frozen=True)
class EventPredicate:
    kind: EventKind | None = None
    event_id: int | None = None
    username: str | None = None

    def __post_init__(self):
        if self.kind is None and self.event_id is None and self.username is None:
            raise ValueError("predicate must constrain at least one field")

    def matches(self, event: SessionEvent) -> bool:
        return (
            (self.kind is None or event.kind is self.kind)
            and (self.event_id is None or event.event_id == self.event_id)
            and (self.username is None or event.username == self.username)
        )


@dataclass(frozen=True)
class CorrelationRule:
    """``steps`` is a one-element tuple for threshold rules.

    ``gaps[i]`` is the longest allowed delay between step i-1 and step i
    (``gaps[0]`` is unused; ``None`` means unbounded).
    """

    id: str
    mode: Mode
    steps: tuple[EventPredicate, ...]
    count: int = 0
    window: timedelta = timedelta(0)
    gaps: tuple[timedelta | None, ...] = ()
    block: timedelta = DEFAULT_BLOCK

    def __post_init__(self):
        if self.block <= timedelta(0):
            raise ValueError(f"rule {self.id!r}: block duration must be positive")
        if self.mode is Mode.THRESHOLD:
            if len(self.steps) != 1:
                raise ValueError(f"rule {self.id!r}: threshold rules take exactly one match")
            if self.count < 2:
                raise ValueError(f"rule {self.id!r}: threshold count must be >= 2, got {self.count}")
            if self.window <= timedelta(0):
                raise ValueError(f"rule {self.id!r}: window must be positive")
        else:
            if len(self.steps) < 2:
                raise ValueError(f"rule {self.id!r}: sequence needs >= 2 steps, got {len(self.steps)}")
            gaps = self.gaps or (None,) * len(self.steps)
            if len(gaps) != len(self.steps):
                raise ValueError(f"rule {self.id!r}: one gap per step expected")
            if any(g is not None and g <= timedelta(0) for g in gaps[1:]):
                raise ValueError(f"rule {self.id!r}: max-gap must be positive")
            object.__setattr__(self, "gaps", tuple(gaps))

    @property
    def event_ids(self) -> set[int]:
        return {p.event_id for p in self.steps if p.event_id is not None}


@dataclass(frozen=True)
class BlockEntry:
    ip: IPv4Address
    expires: datetime
    rule_id: str


@dataclass(frozen=True)
class BlockChange:
    added: tuple[BlockEntry, ...] = ()
    expired: tuple[BlockEntry, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.added or self.expired)


class CorrelationEngine:
    """Stateful matcher. Fed by a single thread; ``active_blocks`` may be
    read from any thread."""

    def __init__(self, rules: Iterable[CorrelationRule] = ()):
        self.rules = tuple(rules)
        self._windows: dict[tuple[str, IPv4Address], deque] = {}
        self._cursors: dict[tuple[str, IPv4Address], tuple[int, datetime]] = {}
        self._blocks: dict[IPv4Address, BlockEntry] = {}
        self._lock = threading.Lock()

    @property
    def event_ids(self) -> set[int]:
        ids: set[int] = set()
        for rule in self.rules:
            ids |= rule.event_ids
        return ids

    def observe(self, event: SessionEvent, now: datetime) -> list[BlockEntry]:
        fired = []
        for rule in self.rules:
            if rule.mode is Mode.THRESHOLD:
                hit = self._step_threshold(rule, event)
            else:
                hit = self._step_sequence(rule, event)
            if hit:
                entry = BlockEntry(event.ip, now + rule.block, rule.id)
                logger.info("rule %s fired for %s, blocked until %s", rule.id, event.ip, entry.expires)
                fired.append(entry)
        if fired:
            with self._lock:
                for entry in fired:
                    current = self._blocks.get(entry.ip)
                    if current is None or entry.expires > current.expires:
                        self._blocks[entry.ip] = entry
        return fired

    def _step_threshold(self, rule: CorrelationRule, event: SessionEvent) -> bool:
        if not rule.steps[0].matches(event):
            return False
        key = (rule.id, event.ip)
        window = self._windows.setdefault(key, deque())
        while window and event.ts - window[0] > rule.window:
            window.popleft()
        window.append(event.ts)
        if len(window) >= rule.count:
            del self._windows[key]
            return True
        return False

    def _step_sequence(self, rule: CorrelationRule, event: SessionEvent) -> bool:
        key = (rule.id, event.ip)
        cursor, last = self._cursors.get(key, (0, None))
        if cursor:
            gap = rule.gaps[cursor]
            if gap is not None and event.ts - last > gap:
                # gap violated: start over and try this event as step 1
                cursor, last = 0, None
                self._cursors.pop(key, None)
        if not rule.steps[cursor].matches(event):
            return False
        cursor += 1
        if cursor == len(rule.steps):
            self._cursors.pop(key, None)
            return True
        self._cursors[key] = (cursor, event.ts)
        return False

    def active_blocks(self, now: datetime) -> list[BlockEntry]:
        """Unexpired blocks, one per IP, sorted by address."""
        with self._lock:
            live = [b for b in self._blocks.values() if b.expires > now]
        return sorted(live, key=lambda b: int(b.ip))

    def expire(self, now: datetime) -> list[BlockEntry]:
        """Drop blocks whose expiry has passed and return them."""
        with self._lock:
            gone = [b for b in self._blocks.values() if b.expires <= now]
            for b in gone:
                del self._blocks[b.ip]
        return gone


_KINDS = {k.value: k for k in EventKind}


def _parse_match(elem: ET.Element, where: str, errors: list[str]) -> EventPredicate | None:
    extra = set(elem.attrib) - {"kind", "event-id", "username"}
    if extra:
        errors.append(f"{where}: unknown match attribute(s) {sorted(extra)}")
    kind = None
    kind_text = elem.get("kind")
    if kind_text is not None and kind_text != "any":
        if kind_text not in _KINDS:
            errors.append(f"{where}: unknown event kind {kind_text!r}")
            return None
        kind = _KINDS[kind_text]
    event_id = None
    if elem.get("event-id") is not None:
        try:
            event_id = int(elem.get("event-id"))
        except ValueError:
            errors.append(f"{where}: invalid event-id {elem.get('event-id')!r}")
            return None
    try:
        return EventPredicate(kind, event_id, elem.get("username"))
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return None


def _single_match(parent: ET.Element, where: str, errors: list[str]) -> EventPredicate | None:
    matches = [c for c in parent if c.tag == "match"]
    for c in parent:
        if c.tag != "match":
            errors.append(f"{where}: unknown element <{c.tag}>")
    if len(matches) != 1:
        errors.append(f"{where}: expected exactly one <match>, found {len(matches)}")
        return None
    return _parse_match(matches[0], where, errors)


def _duration_attr(elem: ET.Element, name: str, where: str, errors: list[str], default=None):
    text = elem.get(name)
    if text is None:
        if default is None:
            errors.append(f"{where}: missing {name}")
        return default
    try:
        value = parse_duration(text)
    except ValueError:
        errors.append(f"{where}: invalid {name} {text!r}")
        return default
    if value <= timedelta(0):
        errors.append(f"{where}: {name} must be positive")
    return value


def _parse_rule(elem: ET.Element, errors: list[str]) -> CorrelationRule | None:
    rule_id = (elem.get("id") or "").strip()
    where = f"rule {rule_id!r}" if rule_id else "rule"
    n_errors = len(errors)
    if not rule_id:
        errors.append("rule without id")
    try:
        mode = Mode(elem.get("mode", ""))
    except ValueError:
        errors.append(f"{where}: unknown mode {elem.get('mode')!r}")
        return None
    block = _duration_attr(elem, "block", where, errors, DEFAULT_BLOCK)

    if mode is Mode.THRESHOLD:
        count_text = elem.get("count", "")
        count = int(count_text) if count_text.strip().isdigit() else None
        if count is None:
            errors.append(f"{where}: invalid count {count_text!r}")
        elif count < 2:
            errors.append(f"{where}: threshold count must be >= 2 (got {count})")
        window = _duration_attr(elem, "window", where, errors)
        pred = _single_match(elem, where, errors)
        if len(errors) > n_errors:
            return None
        return CorrelationRule(rule_id, mode, (pred,), count=count, window=window, block=block)

    steps, gaps = [], []
    for i, step in enumerate(elem):
        step_where = f"{where} step {i + 1}"
        if step.tag != "step":
            errors.append(f"{where}: unknown element <{step.tag}>")
            continue
        anchor = step.get("from", "previous")
        if anchor != "previous":
            errors.append(f"{step_where}: from={anchor!r} is not supported")
        gap = _duration_attr(step, "max-gap", step_where, errors) if "max-gap" in step.attrib else None
        steps.append(_single_match(step, step_where, errors))
        gaps.append(gap)
    if len(steps) < 2:
        errors.append(f"{where}: sequence needs >= 2 steps (got {len(steps)})")
    if len(errors) > n_errors:
        return None
    return CorrelationRule(rule_id, mode, tuple(steps), gaps=tuple(gaps), block=block)


def load_correlation_rules(document: str | bytes) -> list[CorrelationRule]:
    """Parse a ``<correlation>`` document; raises CorrelationValidationError."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise CorrelationValidationError([f"malformed XML: {exc}"]) from exc
    if root.tag != "correlation":
        raise CorrelationValidationError([f"root element must be <correlation>, got <{root.tag}>"])
    errors: list[str] = []
    rules = []
    seen = set()
    for elem in root:
        if elem.tag != "rule":
            errors.append(f"unknown element <{elem.tag}>")
            continue
        rule_id = elem.get("id")
        if rule_id in seen:
            errors.append(f"duplicate rule id {rule_id!r}")
        seen.add(rule_id)
        rule = _parse_rule(elem, errors)
        if rule is not None:
            rules.append(rule)
    if errors:
        raise CorrelationValidationError(errors)
    return rules


def load_correlation_file(path) -> list[CorrelationRule]:
    with open(path, "rb") as fh:
        return load_correlation_rules(fh.read())
