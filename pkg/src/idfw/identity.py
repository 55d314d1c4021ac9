"""Username <-> IP identity table with leases."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from ipaddress import IPv4Address
from typing import Iterable

from .events import EventKind, SessionEvent

DEFAULT_LEASE = timedelta(hours=10)


def user_key(username: str) -> str:
    # Windows account names are case-insensitive
    return username.strip().casefold()


@dataclass(frozen=True)
class IdentityBinding:
    username: str
    ip: IPv4Address
    login_ts: datetime
    lease_expiry: datetime

    def to_dict(self) -> dict:
        return {
            "username": self.username,
            "ip": str(self.ip),
            "login_ts": self.login_ts.isoformat(),
            "lease_expiry": self.lease_expiry.isoformat(),
        }


@dataclass(frozen=True)
class ChangeSummary:
    added: frozenset[IdentityBinding] = frozenset()
    removed: frozenset[IdentityBinding] = frozenset()
    replaced: frozenset[IdentityBinding] = frozenset()

    def __bool__(self) -> bool:
        return bool(self.added or self.removed or self.replaced)

    @property
    def is_empty(self) -> bool:
        return not self


EMPTY_CHANGE = ChangeSummary()


@dataclass(frozen=True)
class IdentitySnapshot:
    bindings: frozenset[IdentityBinding]
    version: int
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        index: dict[str, list[IPv4Address]] = {}
        seen: set[IPv4Address] = set()
        for b in self.bindings:
            if b.ip in seen:
                raise ValueError(f"two bindings share {b.ip}")
            seen.add(b.ip)
            index.setdefault(user_key(b.username), []).append(b.ip)
        object.__setattr__(
            self, "_index", {k: tuple(sorted(v, key=int)) for k, v in index.items()}
        )

    def lookup_ips(self, username: str) -> list[IPv4Address]:
        return list(self._index.get(user_key(username), ()))

    def to_dict(self) -> dict:
        ordered = sorted(self.bindings, key=lambda b: int(b.ip))
        return {"version": self.version, "bindings": [b.to_dict() for b in ordered]}

    @classmethod
    def from_bindings(cls, bindings: Iterable[IdentityBinding], version: int = 0) -> "IdentitySnapshot":
        return cls(frozenset(bindings), version)


class IdentityTable:
    """Live identity state. One writer; snapshots may be taken from anywhere.

    At most one user holds an IP; a login on an occupied IP evicts the
    previous holder. A user may hold several IPs.
    """

    def __init__(self, lease: timedelta = DEFAULT_LEASE):
        if lease <= timedelta(0):
            raise ValueError("lease must be positive")
        self.lease = lease
        self._by_ip: dict[IPv4Address, IdentityBinding] = {}
        self._version = 0
        self._lock = threading.Lock()

    @property
    def version(self) -> int:
        return self._version

    def __len__(self) -> int:
        return len(self._by_ip)

    def apply_event(self, event: SessionEvent, now: datetime) -> ChangeSummary:
        if event.kind is EventKind.LOGIN:
            return self._login(event, now)
        if event.kind is EventKind.LOGOFF:
            return self._logoff(event)
        # failed logins and system events are correlation inputs only
        return EMPTY_CHANGE

    def _login(self, event: SessionEvent, now: datetime) -> ChangeSummary:
        binding = IdentityBinding(event.username.strip(), event.ip, now, now + self.lease)
        with self._lock:
            previous = self._by_ip.get(event.ip)
            self._by_ip[event.ip] = binding
            self._version += 1
        if previous is None:
            return ChangeSummary(added=frozenset({binding}))
        if user_key(previous.username) == user_key(binding.username):
            return ChangeSummary(replaced=frozenset({binding}))
        return ChangeSummary(added=frozenset({binding}), removed=frozenset({previous}))

    def _logoff(self, event: SessionEvent) -> ChangeSummary:
        with self._lock:
            current = self._by_ip.get(event.ip)
            if current is None or user_key(current.username) != user_key(event.username):
                return EMPTY_CHANGE
            del self._by_ip[event.ip]
            self._version += 1
        return ChangeSummary(removed=frozenset({current}))

    def expire_stale(self, now: datetime) -> ChangeSummary:
        with self._lock:
            stale = [b for b in self._by_ip.values() if b.lease_expiry <= now]
            if not stale:
                return EMPTY_CHANGE
            for b in stale:
                del self._by_ip[b.ip]
            self._version += 1
        return ChangeSummary(removed=frozenset(stale))

    def lookup_ips(self, username: str) -> list[IPv4Address]:
        key = user_key(username)
        with self._lock:
            ips = [b.ip for b in self._by_ip.values() if user_key(b.username) == key]
        return sorted(ips, key=int)

    def snapshot(self) -> IdentitySnapshot:
        with self._lock:
            return IdentitySnapshot(frozenset(self._by_ip.values()), self._version)
