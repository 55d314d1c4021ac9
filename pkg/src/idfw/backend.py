"""Simulated enforcement point: atomic ruleset install and first-match lookup."""
from __future__ import annotations

import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from ipaddress import IPv4Address
from pathlib import Path

from .compiler import ConcreteRule, ConcreteRuleset, emit_text, parse_rules_text
from .policy import Action, Proto

logger = logging.getLogger(__name__)


class StaleGeneration(RuntimeError):
    """An install tried to go backwards (or sideways) in generation."""


class NoPolicy(RuntimeError):
    """Query issued before any ruleset was installed."""


class RuleFileError(OSError):
    pass


@dataclass(frozen=True)
class PacketQuery:
    src: IPv4Address
    dst: IPv4Address
    proto: Proto
    dport: int

    def __post_init__(self):
        object.__setattr__(self, "src", IPv4Address(self.src))
        object.__setattr__(self, "dst", IPv4Address(self.dst))
        object.__setattr__(self, "proto", Proto(self.proto))
        if self.proto is Proto.ANY:
            raise ValueError("query protocol must be tcp or udp")
        if not 1 <= int(self.dport) <= 65535:
            raise ValueError(f"invalid port {self.dport}")


@dataclass(frozen=True)
class Decision:
    action: Action
    matched_priority: int
    origin_rule_id: str
    generation: int


@dataclass(frozen=True)
class InstallReceipt:
    generation: int
    ts: datetime


def _matcher(rule: ConcreteRule) -> tuple:
    src, dst = rule.src, rule.dst
    return (
        int(src.network_address),
        int(src.netmask),
        int(dst.network_address),
        int(dst.netmask),
        None if rule.proto is Proto.ANY else rule.proto,
        rule.dport,
        rule,
    )


class _Active:
    __slots__ = ("ruleset", "matchers")

    def __init__(self, ruleset: ConcreteRuleset):
        self.ruleset = ruleset
        self.matchers = tuple(_matcher(r) for r in ruleset.rules)


class FirewallBackend:
    """In-memory firewall.

    Readers grab the active ruleset through a single reference read, so a
    query sees either the old or the new generation in full. Installs are
    serialized by a lock that readers never take.
    """

    def __init__(self, rule_file: str | os.PathLike | None = None):
        self.rule_file = Path(rule_file) if rule_file else None
        self._active: _Active | None = None
        self._install_lock = threading.Lock()
        self.installs = 0

    @property
    def generation(self) -> int:
        active = self._active
        return active.ruleset.generation if active else 0

    @property
    def ruleset(self) -> ConcreteRuleset | None:
        active = self._active
        return active.ruleset if active else None

    def install(self, ruleset: ConcreteRuleset) -> InstallReceipt:
        with self._install_lock:
            current = self.generation
            if self._active is not None and ruleset.generation <= current:
                raise StaleGeneration(
                    f"generation {ruleset.generation} is not newer than active {current}"
                )
            staged = _Active(ruleset)
            ts = datetime.now(timezone.utc)
            if self.rule_file is not None:
                write_rule_file(ruleset, self.rule_file, ts)
            self._active = staged
            self.installs += 1
        logger.debug("installed generation %d (%d rules)", ruleset.generation, len(ruleset.rules))
        return InstallReceipt(ruleset.generation, ts)

    def evaluate(self, query: PacketQuery) -> Decision:
        active = self._active
        if active is None:
            raise NoPolicy("no ruleset installed")
        src, dst = int(query.src), int(query.dst)
        proto, dport = query.proto, query.dport
        for s_net, s_mask, d_net, d_mask, r_proto, r_port, rule in active.matchers:
            if (
                src & s_mask == s_net
                and dst & d_mask == d_net
                and (r_proto is None or r_proto is proto)
                and (r_port is None or r_port == dport)
            ):
                return Decision(rule.action, rule.priority, rule.origin_rule_id, active.ruleset.generation)
        # compiled rulesets always end in a catch-all; hand-made ones may not
        raise LookupError(f"no rule matched {query}")


def write_rule_file(ruleset: ConcreteRuleset, path: str | os.PathLike, timestamp: datetime | None = None) -> None:
    """Write ``emit_text(ruleset)`` atomically via a temp file and rename."""
    path = Path(path)
    text = emit_text(ruleset, timestamp)
    tmp_name = None
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
        tmp_name = None
    except OSError as exc:
        raise RuleFileError(f"cannot write rule file {path}: {exc}") from exc
    finally:
        if tmp_name is not None:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass


def load_rule_file(path: str | os.PathLike) -> ConcreteRuleset:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RuleFileError(f"cannot read rule file {path}: {exc}") from exc
    ruleset, _ = parse_rules_text(text)
    return ruleset
