"""Authentication event ingestion.

Two sources feed the engine: line-delimited JSON replays of domain
controller event-log records, and live syslog datagrams from Unix hosts.
Both are normalized into :class:`SessionEvent` values.
"""
from __future__ import annotations

import json
import logging
import re
import socket
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from ipaddress import IPv4Address, AddressValueError
from typing import Callable, Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)

MAX_DATAGRAM = 8192


class ParseError(ValueError):
    """A raw record could not be turned into an event."""


class EventKind(str, Enum):
    LOGIN = "login"
    LOGOFF = "logoff"
    FAILED_LOGIN = "failed-login"
    # any other event-log id that correlation rules reference
    SYSTEM = "system"


@dataclass(frozen=True)
class SessionEvent:
    kind: EventKind
    username: str
    ip: IPv4Address
    ts: datetime
    source: str
    event_id: int | None = None

    def __str__(self) -> str:
        return f"{self.kind.value}({self.username}@{self.ip})"


@dataclass(frozen=True)
class EventIdMap:
    """Windows event id -> event kind table.

    Defaults are the pre-Vista ids; newer ids (4624/4634/4625) can be added
    through config. ``system`` ids are passed through untouched so that
    correlation rules can match on them.
    """

    login: frozenset[int] = frozenset({540})
    logoff: frozenset[int] = frozenset({538})
    failed: frozenset[int] = frozenset({529})
    system: frozenset[int] = frozenset()

    @classmethod
    def from_config(cls, raw: Mapping[str, Iterable[int]] | None) -> "EventIdMap":
        fields = {"login": "login", "logoff": "logoff", "failed": "failed", "failed-login": "failed", "system": "system"}
        values = {}
        for key, ids in (raw or {}).items():
            if key not in fields:
                raise ValueError(f"unknown event kind {key!r} in id map")
            values[fields[key]] = frozenset(int(i) for i in ids)
        return cls(**values)

    def with_system(self, ids: Iterable[int]) -> "EventIdMap":
        return EventIdMap(self.login, self.logoff, self.failed, self.system | frozenset(ids))

    def kind_of(self, event_id: int) -> EventKind | None:
        if event_id in self.login:
            return EventKind.LOGIN
        if event_id in self.logoff:
            return EventKind.LOGOFF
        if event_id in self.failed:
            return EventKind.FAILED_LOGIN
        if event_id in self.system:
            return EventKind.SYSTEM
        return None

    def canonical_id(self, kind: EventKind) -> int | None:
        ids = {
            EventKind.LOGIN: self.login,
            EventKind.LOGOFF: self.logoff,
            EventKind.FAILED_LOGIN: self.failed,
            EventKind.SYSTEM: self.system,
        }[kind]
        return min(ids) if ids else None


DEFAULT_ID_MAP = EventIdMap()

_REPLAY_FIELDS = ("ts", "event_id", "username", "ip", "source")


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    if not isinstance(text, str) or not text:
        raise ParseError(f"invalid timestamp: {text!r}")
    norm = text.strip()
    if norm[-1:] in ("Z", "z"):
        norm = norm[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(norm)
    except ValueError as exc:
        raise ParseError(f"invalid timestamp: {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_ipv4(text: object) -> IPv4Address:
    if not isinstance(text, str):
        raise ParseError(f"invalid IPv4 address: {text!r}")
    try:
        return IPv4Address(text)
    except (AddressValueError, ValueError) as exc:
        raise ParseError(f"invalid IPv4 address: {text!r}") from exc


def parse_replay_line(line: str | bytes, id_map: EventIdMap = DEFAULT_ID_MAP) -> SessionEvent | None:
    """Parse one replay record.

    Returns ``None`` for records whose event id is not mapped. Raises
    :class:`ParseError` for anything malformed.
    """
    if isinstance(line, (bytes, bytearray)):
        try:
            line = bytes(line).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("record is not valid UTF-8") from exc
    try:
        record = json.loads(line)
    except (ValueError, RecursionError) as exc:
        raise ParseError(f"malformed JSON record: {exc}") from exc
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object")
    missing = [name for name in _REPLAY_FIELDS if name not in record]
    if missing:
        raise ParseError(f"missing field(s): {', '.join(missing)}")

    event_id = record["event_id"]
    if not isinstance(event_id, int) or isinstance(event_id, bool):
        raise ParseError(f"event_id must be an integer, got {event_id!r}")
    username, source = record["username"], record["source"]
    if not isinstance(username, str) or not isinstance(source, str):
        raise ParseError("username and source must be strings")
    ts = parse_timestamp(record["ts"])
    ip = parse_ipv4(record["ip"])

    kind = id_map.kind_of(event_id)
    if kind is None:
        return None
    if kind in (EventKind.LOGIN, EventKind.LOGOFF) and not username.strip():
        raise ParseError(f"empty username on {kind.value} record")
    return SessionEvent(kind, username, ip, ts, source, event_id)


def to_replay_record(event: SessionEvent, id_map: EventIdMap = DEFAULT_ID_MAP) -> str:
    event_id = event.event_id if event.event_id is not None else id_map.canonical_id(event.kind)
    if event_id is None:
        raise ValueError(f"no event id known for {event.kind.value}")
    return json.dumps(
        {
            "ts": format_timestamp(event.ts),
            "event_id": event_id,
            "username": event.username,
            "ip": str(event.ip),
            "source": event.source,
        }
    )


def read_replay(lines: Iterable[str], id_map: EventIdMap = DEFAULT_ID_MAP) -> Iterator[SessionEvent]:
    """Yield events from replay lines, logging and skipping bad records."""
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            event = parse_replay_line(line, id_map)
        except ParseError as exc:
            logger.warning("replay line %d skipped: %s", lineno, exc)
            continue
        if event is not None:
            yield event


@dataclass(frozen=True)
class SyslogPattern:
    name: str
    regex: re.Pattern
    kind: EventKind

    def __post_init__(self):
        if isinstance(self.regex, str):
            try:
                object.__setattr__(self, "regex", re.compile(self.regex))
            except re.error as exc:
                raise ValueError(f"pattern {self.name!r}: bad regex: {exc}") from exc
        if self.kind in (EventKind.LOGIN, EventKind.LOGOFF) and "user" not in self.regex.groupindex:
            raise ValueError(f"pattern {self.name!r}: {self.kind.value} patterns need a (?P<user>...) group")

    @classmethod
    def from_config(cls, raw: Mapping[str, str]) -> "SyslogPattern":
        return cls(raw["name"], raw["regex"], EventKind(raw["kind"]))


DEFAULT_PATTERNS = (
    SyslogPattern(
        "sshd-accepted",
        r"sshd\[\d+\]: Accepted \S+ for (?P<user>\S+) from ",
        EventKind.LOGIN,
    ),
    SyslogPattern(
        "sshd-session-closed",
        r"pam_unix\(sshd:session\): session closed for user (?P<user>\S+)",
        EventKind.LOGOFF,
    ),
)

_PRI = re.compile(r"^<(\d{1,3})>")


def parse_syslog_datagram(
    payload: bytes,
    sender_ip: IPv4Address | str,
    patterns: Iterable[SyslogPattern] = DEFAULT_PATTERNS,
    now: datetime | None = None,
) -> SessionEvent | None:
    """Match a syslog datagram against ``patterns``.

    The bound address is always ``sender_ip``; addresses mentioned in the
    message text are ignored. Returns ``None`` when no pattern matches.
    """
    if len(payload) > MAX_DATAGRAM:
        raise ParseError(f"datagram of {len(payload)} bytes exceeds {MAX_DATAGRAM}")
    try:
        text = bytes(payload).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("datagram is not valid UTF-8") from exc
    body = _PRI.sub("", text, count=1).strip()
    ip = IPv4Address(sender_ip)

    for pattern in patterns:
        m = pattern.regex.search(body)
        if m is None:
            continue
        user = (m.groupdict().get("user") or "").strip()
        if pattern.kind in (EventKind.LOGIN, EventKind.LOGOFF) and not user:
            continue
        ts = now if now is not None else datetime.now(timezone.utc)
        return SessionEvent(pattern.kind, user, ip, ts, f"syslog:{ip}")
    return None


@dataclass
class ListenerStats:
    received: int = 0
    delivered: int = 0
    skipped: int = 0
    errors: int = 0


class SyslogListener:
    """UDP syslog receiver delivering parsed events to ``sink``.

    Datagrams are handled on one thread in arrival order, so per-sender
    FIFO holds. Binding happens in the constructor so a bad address fails
    at startup.
    """

    def __init__(
        self,
        bind: tuple[str, int],
        sink: Callable[[SessionEvent], object],
        patterns: Iterable[SyslogPattern] = DEFAULT_PATTERNS,
        poll_interval: float = 0.2,
    ):
        self.patterns = tuple(patterns)
        self.sink = sink
        self.stats = ListenerStats()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self._sock.bind(bind)
        except OSError:
            self._sock.close()
            raise
        self._sock.settimeout(poll_interval)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    payload, (host, _port) = self._sock.recvfrom(MAX_DATAGRAM + 1)
                except socket.timeout:
                    continue
                except OSError:
                    if self._stop.is_set():
                        break
                    raise
                self.handle(payload, host)
        finally:
            self._sock.close()

    def handle(self, payload: bytes, host: str) -> None:
        self.stats.received += 1
        try:
            event = parse_syslog_datagram(payload, host, self.patterns)
        except (ParseError, ValueError) as exc:
            self.stats.errors += 1
            logger.warning("syslog datagram from %s rejected: %s", host, exc)
            return
        if event is None:
            self.stats.skipped += 1
            return
        self.stats.delivered += 1
        self.sink(event)

    def start(self) -> "SyslogListener":
        self._thread = threading.Thread(target=self.serve_forever, name="syslog-listener", daemon=True)
        self._thread.start()
        return self

    def shutdown(self, timeout: float | None = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)


def run_syslog_listener(
    bind: tuple[str, int],
    patterns: Iterable[SyslogPattern],
    sink: Callable[[SessionEvent], object],
    stop: threading.Event | None = None,
) -> ListenerStats:
    """Blocking form of :class:`SyslogListener`; returns when ``stop`` is set."""
    listener = SyslogListener(bind, sink, patterns)
    if stop is not None:
        listener._stop = stop
    listener.serve_forever()
    return listener.stats
