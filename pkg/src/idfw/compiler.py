"""Compile a meta-policy plus live identity state into concrete rules.

Output order is three tiers: correlation blocks, then the policy rules in
document order (identity rules expanded per bound address), then the
default catch-all. Priorities are 10, 20, 30, ... in emission order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime
from ipaddress import IPv4Address, IPv4Network
from typing import Iterable

from .events import format_timestamp, parse_timestamp
from .identity import IdentitySnapshot
from .policy import Action, IdentityRule, MetaPolicy, Proto, parse_network, parse_port

logger = logging.getLogger(__name__)

BLOCK_ORIGIN = "__block__"
DEFAULT_ORIGIN = "__default__"
PRIORITY_STRIDE = 10
ANY_NET = IPv4Network("0.0.0.0/0")


@dataclass(frozen=True)
class ConcreteRule:
    priority: int
    action: Action
    src: IPv4Network
    dst: IPv4Network
    proto: Proto
    dport: int | None
    origin_rule_id: str
    origin_user: str | None = None

    def to_line(self) -> str:
        dport = "any" if self.dport is None else str(self.dport)
        user = self.origin_user if self.origin_user else "-"
        return (
            f"{self.priority} {self.action.value} src {self.src} dst {self.dst} "
            f"proto {self.proto.value} dport {dport} # origin={self.origin_rule_id} user={user}"
        )


@dataclass(frozen=True)
class ConcreteRuleset:
    rules: tuple[ConcreteRule, ...]
    generation: int
    compiled_from: tuple[int, int]  # (policy version, snapshot version)

    def __post_init__(self):
        prios = [r.priority for r in self.rules]
        if any(a >= b for a, b in zip(prios, prios[1:])):
            raise ValueError("rules must be strictly ascending by priority")


def _block_ips(blocks: Iterable) -> list[IPv4Address]:
    ips = {IPv4Address(getattr(b, "ip", b)) for b in blocks}
    return sorted(ips, key=int)


def compile_policy(
    policy: MetaPolicy,
    snapshot: IdentitySnapshot,
    blocks: Iterable = (),
    generation: int = 0,
) -> ConcreteRuleset:
    """Pure compile. ``blocks`` holds BlockEntry objects or plain addresses."""
    emitted: list[tuple] = []
    for ip in _block_ips(blocks):
        emitted.append((Action.DENY, IPv4Network(f"{ip}/32"), ANY_NET, Proto.ANY, None, BLOCK_ORIGIN, None))

    for rule in policy.rules:
        svc = rule.service
        if isinstance(rule, IdentityRule):
            for ip in snapshot.lookup_ips(rule.user):
                emitted.append(
                    (rule.action, IPv4Network(f"{ip}/32"), rule.destination, svc.proto, svc.port, rule.id, rule.user)
                )
        else:
            emitted.append((rule.action, rule.source, rule.destination, svc.proto, svc.port, rule.id, None))

    emitted.append((policy.default_action, ANY_NET, ANY_NET, Proto.ANY, None, DEFAULT_ORIGIN, None))
    rules = tuple(ConcreteRule((i + 1) * PRIORITY_STRIDE, *fields) for i, fields in enumerate(emitted))
    return ConcreteRuleset(rules, generation, (policy.version, snapshot.version))


class Recompiler:
    """Turns change notifications into new rulesets with fresh generations.

    Every non-empty change triggers a full compile; at the rule counts this
    engine targets a full compile is cheap and trivially correct.
    """

    def __init__(self, generation: int = 0):
        self.generation = generation

    def recompile_on_change(
        self,
        change,
        policy: MetaPolicy,
        snapshot: IdentitySnapshot,
        blocks: Iterable = (),
    ) -> ConcreteRuleset | None:
        """Return the new ruleset, or ``None`` when ``change`` is empty."""
        if not change:
            return None
        self.generation += 1
        return compile_policy(policy, snapshot, blocks, self.generation)


def emit_text(ruleset: ConcreteRuleset, timestamp: datetime | None = None) -> str:
    """Render one line per rule. Identical rulesets render identically
    unless a ``timestamp`` header is requested."""
    policy_version, snapshot_version = ruleset.compiled_from
    lines = [
        "# idfw concrete ruleset",
        f"# generation={ruleset.generation}",
        f"# policy_version={policy_version}",
        f"# snapshot_version={snapshot_version}",
    ]
    if timestamp is not None:
        lines.append(f"# timestamp={format_timestamp(timestamp)}")
    lines.extend(rule.to_line() for rule in ruleset.rules)
    return "\n".join(lines) + "\n"


def _parse_rule_line(line: str) -> ConcreteRule:
    body, sep, comment = line.partition(" # ")
    parts = body.split()
    if not sep or len(parts) != 10 or parts[2::2] != ["src", "dst", "proto", "dport"]:
        raise ValueError(f"malformed rule line: {line!r}")
    prio, action, _, src, _, dst, _, proto, _, dport = parts
    meta = {}
    for token in comment.split(" ", 1):
        key, _, value = token.partition("=")
        meta[key] = value
    if "origin" not in meta or "user" not in meta:
        raise ValueError(f"rule line lacks origin/user: {line!r}")
    return ConcreteRule(
        int(prio),
        Action(action),
        parse_network(src),
        parse_network(dst),
        Proto(proto),
        parse_port(dport),
        meta["origin"],
        None if meta["user"] == "-" else meta["user"],
    )


def parse_rules_text(text: str) -> tuple[ConcreteRuleset, datetime | None]:
    """Inverse of :func:`emit_text`; returns the ruleset and header timestamp."""
    header: dict[str, str] = {}
    rules = []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, eq, value = line[1:].strip().partition("=")
            if eq:
                header[key] = value
            continue
        rules.append(_parse_rule_line(line))
    try:
        generation = int(header["generation"])
        compiled_from = (int(header["policy_version"]), int(header["snapshot_version"]))
    except (KeyError, ValueError) as exc:
        raise ValueError("rule file header is incomplete") from exc
    ts = parse_timestamp(header["timestamp"]) if "timestamp" in header else None
    return ConcreteRuleset(tuple(rules), generation, compiled_from), ts
