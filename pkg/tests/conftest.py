from datetime import datetime, timedelta, timezone
from ipaddress import IPv4Address
from pathlib import Path

import pytest

from idfw.events import EventKind, SessionEvent

DATA = Path(__file__).parent / "data"
T0 = datetime(2024, 1, 1, 10, 0, 0, tzinfo=timezone.utc)

POLICY_XML = r"""<metapolicy version="1">
  <identity-rule id="r1" action="permit">
    <user>CORP\alice</user>
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

SINGLE_RULE_XML = r"""<metapolicy version="1">
  <identity-rule id="r1" action="permit">
    <user>CORP\alice</user>
    <destination>10.1.0.10/32</destination>
    <service proto="tcp" port="443"/>
  </identity-rule>
  <default action="deny"/>
</metapolicy>
"""

CORRELATION_XML = """<correlation version="1">
  <rule id="bruteforce" mode="threshold" count="3" window="60s" block="900s">
    <match kind="failed-login"/>
  </rule>
  <rule id="svc-attack" mode="sequence" block="900s">
    <step><match kind="login"/></step>
    <step max-gap="30s"><match event-id="7001"/></step>
  </rule>
</correlation>
"""


def at(seconds: float) -> datetime:
    return T0 + timedelta(seconds=seconds)


def login(user, ip, t=0.0, source="dc1"):
    return SessionEvent(EventKind.LOGIN, user, IPv4Address(ip), at(t), source, 540)


def logoff(user, ip, t=0.0, source="dc1"):
    return SessionEvent(EventKind.LOGOFF, user, IPv4Address(ip), at(t), source, 538)


def failed(ip, t=0.0, user="CORP\\mallory"):
    return SessionEvent(EventKind.FAILED_LOGIN, user, IPv4Address(ip), at(t), "dc1", 529)


@pytest.fixture
def policy_xml():
    return POLICY_XML


@pytest.fixture
def single_rule_policy():
    from idfw.policy import parse_meta_policy

    return parse_meta_policy(SINGLE_RULE_XML)


# acceptance summary: one line per criterion

_criteria: dict[str, list[str]] = {}



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not marker.args:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria.setdefault(marker.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0])):
        ok = all(o == "passed" for o in _criteria[label])
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
