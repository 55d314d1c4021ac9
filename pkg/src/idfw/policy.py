"""XML meta-policy: identity rules, plain L3 rules and a default action.

Identity rules name a user instead of a source address; the compiler
resolves the user to addresses from the identity table.

    <metapolicy version="1">
      <identity-rule id="r1" action="permit">
        <user>CORP\\alice</user>
        <destination>10.1.0.10/32</destination>
        <service proto="tcp" port="443"/>
      </identity-rule>
      <l3-rule id="g1" action="permit">
        <source>192.168.50.0/24</source>
        <destination>10.1.0.20/32</destination>
        <service proto="tcp" port="80"/>
      </l3-rule>
      <default action="deny"/>
    </metapolicy>
"""
from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass
from enum import Enum
from ipaddress import IPv4Network
from typing import Iterable, Union

from .identity import user_key


class Action(str, Enum):
    PERMIT = "permit"
    DENY = "deny"


class Proto(str, Enum):
    TCP = "tcp"
    UDP = "udp"
    ANY = "any"


@dataclass(frozen=True)
class Service:
    """Protocol plus destination port; ``port=None`` means any port.

    A port with ``proto=any`` matches that port over tcp or udp.
    """

    proto: Proto = Proto.ANY
    port: int | None = None

    def __str__(self) -> str:
        return f"{self.proto.value}/{'any' if self.port is None else self.port}"


ANY_SERVICE = Service()


@dataclass(frozen=True)
class IdentityRule:
    id: str
    action: Action
    user: str
    destination: IPv4Network
    service: Service = ANY_SERVICE


@dataclass(frozen=True)
class L3Rule:
    id: str
    action: Action
    source: IPv4Network
    destination: IPv4Network
    service: Service = ANY_SERVICE


Rule = Union[IdentityRule, L3Rule]


@dataclass(frozen=True)
class MetaPolicy:
    version: int
    rules: tuple[Rule, ...]
    default_action: Action

    @property
    def identity_rules(self) -> list[IdentityRule]:
        return [r for r in self.rules if isinstance(r, IdentityRule)]

    def users(self) -> set[str]:
        return {r.user for r in self.identity_rules}


class PolicyValidationError(ValueError):
    """Raised with every violation found in a policy document."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))

    def report(self) -> str:
        return "\n".join(f"error: {v}" for v in self.violations)


def parse_network(text: str | None) -> IPv4Network:
    """Parse a CIDR (or bare address, taken as /32). Raises ValueError."""
    if text is None or not text.strip():
        raise ValueError("empty address")
    text = text.strip()
    if "/" in text:
        prefix = text.rsplit("/", 1)[1]
        if not prefix.isdigit() or not 0 <= int(prefix) <= 32:
            raise ValueError(f"invalid CIDR prefix in {text!r}")
    try:
        return IPv4Network(text, strict=True)
    except ValueError as exc:
        raise ValueError(f"invalid CIDR {text!r}: {exc}") from exc


def parse_port(text: str | None) -> int | None:
    if text is None or text.strip().lower() in ("", "any"):
        return None
    text = text.strip()
    if not text.isdigit() or not 1 <= int(text) <= 65535:
        raise ValueError(f"invalid port {text!r} (expected 1-65535 or 'any')")
    return int(text)


def _parse_service(elem: ET.Element | None, where: str, errors: list[str]) -> Service:
    if elem is None:
        return ANY_SERVICE
    extra = set(elem.attrib) - {"proto", "port"}
    if extra:
        errors.append(f"{where}: unknown service attribute(s) {sorted(extra)}")
    proto_text = elem.get("proto", "any").strip().lower()
    try:
        proto = Proto(proto_text)
    except ValueError:
        errors.append(f"{where}: invalid protocol {proto_text!r}")
        proto = Proto.ANY
    try:
        port = parse_port(elem.get("port"))
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        port = None
    return Service(proto, port)


_RULE_CHILDREN = {
    "identity-rule": ({"user", "destination"}, {"service"}),
    "l3-rule": ({"source", "destination"}, {"service"}),
}


def _parse_rule(elem: ET.Element, index: int, errors: list[str]) -> Rule | None:
    rule_id = (elem.get("id") or "").strip()
    where = f"{elem.tag} #{index + 1}" + (f" ({rule_id})" if rule_id else "")
    n_errors = len(errors)
    if not rule_id:
        errors.append(f"{where}: missing id")

    action_text = (elem.get("action") or "").strip().lower()
    try:
        action = Action(action_text)
    except ValueError:
        errors.append(f"{where}: invalid action {action_text!r}")
        action = Action.DENY

    required, optional = _RULE_CHILDREN[elem.tag]
    children: dict[str, ET.Element] = {}
    for child in elem:
        if child.tag not in required | optional:
            errors.append(f"{where}: unknown element <{child.tag}>")
        elif child.tag in children:
            errors.append(f"{where}: duplicate <{child.tag}>")
        else:
            children[child.tag] = child
    for tag in sorted(required - set(children)):
        errors.append(f"{where}: missing <{tag}>")

    nets = {}
    for tag in ("source", "destination"):
        if tag in children:
            try:
                nets[tag] = parse_network(children[tag].text)
            except ValueError as exc:
                errors.append(f"{where}: <{tag}>: {exc}")
    service = _parse_service(children.get("service"), where, errors)

    if elem.tag == "identity-rule":
        user = (children["user"].text or "").strip() if "user" in children else ""
        if "user" in children and not user:
            errors.append(f"{where}: empty <user>")
        if len(errors) > n_errors:
            return None
        return IdentityRule(rule_id, action, user, nets["destination"], service)
    if len(errors) > n_errors:
        return None
    return L3Rule(rule_id, action, nets["source"], nets["destination"], service)


def parse_meta_policy(document: str | bytes) -> MetaPolicy:
    """Parse and validate a policy document.

    Raises :class:`PolicyValidationError` listing every violation.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise PolicyValidationError([f"malformed XML: {exc}"]) from exc

    errors: list[str] = []
    if root.tag != "metapolicy":
        raise PolicyValidationError([f"root element must be <metapolicy>, got <{root.tag}>"])
    version_text = root.get("version", "1").strip()
    if not version_text.isdigit():
        errors.append(f"invalid policy version {version_text!r}")
        version = 0
    else:
        version = int(version_text)

    rules: list[Rule] = []
    seen_ids: set[str] = set()
    default: Action | None = None
    n_defaults = 0
    for index, elem in enumerate(root):
        if elem.tag in _RULE_CHILDREN:
            rule_id = (elem.get("id") or "").strip()
            if rule_id and rule_id in seen_ids:
                errors.append(f"duplicate rule id {rule_id!r}")
            seen_ids.add(rule_id)
            rule = _parse_rule(elem, index, errors)
            if rule is not None:
                rules.append(rule)
        elif elem.tag == "default":
            n_defaults += 1
            action_text = (elem.get("action") or "").strip().lower()
            try:
                default = Action(action_text)
            except ValueError:
                errors.append(f"<default>: invalid action {action_text!r}")
        else:
            errors.append(f"unknown element <{elem.tag}>")

    if n_defaults == 0:
        errors.append("missing <default> action")
    elif n_defaults > 1:
        errors.append("more than one <default> element")
    if errors:
        raise PolicyValidationError(errors)
    return MetaPolicy(version, tuple(rules), default)


def _service_elem(parent: ET.Element, service: Service) -> None:
    attrs = {"proto": service.proto.value}
    if service.port is not None:
        attrs["port"] = str(service.port)
    ET.SubElement(parent, "service", attrs)


def to_xml(policy: MetaPolicy) -> str:
    """Render ``policy`` as a canonical document that parses back identically."""
    root = ET.Element("metapolicy", {"version": str(policy.version)})
    for rule in policy.rules:
        if isinstance(rule, IdentityRule):
            elem = ET.SubElement(root, "identity-rule", {"id": rule.id, "action": rule.action.value})
            ET.SubElement(elem, "user").text = rule.user
        else:
            elem = ET.SubElement(root, "l3-rule", {"id": rule.id, "action": rule.action.value})
            ET.SubElement(elem, "source").text = str(rule.source)
        ET.SubElement(elem, "destination").text = str(rule.destination)
        _service_elem(elem, rule.service)
    ET.SubElement(root, "default", {"action": policy.default_action.value})
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def load_meta_policy(path) -> MetaPolicy:
    with open(path, "rb") as fh:
        return parse_meta_policy(fh.read())


def validate_against_directory(policy: MetaPolicy, known_users: Iterable[str]) -> list[str]:
    known = {user_key(u) for u in known_users}
    return [
        f"rule {rule.id!r}: user {rule.user!r} is not a known directory account"
        for rule in policy.identity_rules
        if user_key(rule.user) not in known
    ]
