"""Acceptance gate. Each test carries an ``acceptance`` marker naming its
criterion; conftest prints one PASS/FAIL line per criterion at the end.

Run alone with ``pytest tests/test_acceptance.py``.
"""
import csv
import itertools
import json
import socket
import time
from datetime import timedelta
from ipaddress import IPv4Address, IPv4Network

import pytest

from idfw.backend import FirewallBackend, PacketQuery
from idfw.bench import DEFAULT_CLIENT_COUNTS, linear_r2
from idfw.cli import main
from idfw.compiler import BLOCK_ORIGIN, Recompiler, compile_policy, emit_text
from idfw.correlation import CorrelationEngine, CorrelationRule, EventPredicate, Mode, load_correlation_rules
from idfw.events import EventKind, parse_replay_line
from idfw.identity import IdentitySnapshot, IdentityTable
from idfw.pipeline import Pipeline
from idfw.policy import Action, IdentityRule, L3Rule, MetaPolicy, Proto, Service

from conftest import CORRELATION_XML, DATA, at, failed, login, logoff
from oracles import (
    USERS,
    linear_scan,
    prepare,
    random_blocks,
    random_ip,
    random_policy,
    random_query,
    random_snapshot,
    rng_for,
    threshold_fires,
)

pytestmark = pytest.mark.slow
ALICE = "CORP\\alice"
EMPTY = IdentitySnapshot.from_bindings(())


@pytest.mark.acceptance("1 bench: linear totals, avg < 50 ms, 30 clients < 30 s")
def test_bench_shape(tmp_path):
    out = tmp_path / "bench.csv"
    started = time.perf_counter()
    rc = main(["bench", "--clients", ",".join(map(str, DEFAULT_CLIENT_COUNTS)), "--csv", str(out)])
    elapsed = time.perf_counter() - started
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    assert [int(r["clients"]) for r in rows] == list(DEFAULT_CLIENT_COUNTS)
    assert all(int(r["failed"]) == 0 for r in rows)
    ns = [int(r["clients"]) for r in rows]
    totals = [float(r["total_ms"]) for r in rows]
    r2 = linear_r2(ns, totals)
    worst = max(float(r["avg_ms"]) for r in rows)
    print(f"\nbench: R2={r2:.4f} worst avg={worst:.3f}ms wall={elapsed:.2f}s")
    assert r2 > 0.99
    assert worst < 50.0
    assert elapsed < 30.0


@pytest.mark.acceptance("2 event-id mapping: golden 20-line replay")
def test_golden_replay():
    lines = (DATA / "replay_golden.jsonl").read_text().splitlines()
    expected = json.loads((DATA / "replay_golden.expected.json").read_text())
    assert len(lines) == len(expected) == 20
    got = []
    for line in lines:
        ev = parse_replay_line(line)
        got.append(None if ev is None else {"kind": ev.kind.value, "username": ev.username, "ip": str(ev.ip)})
    assert got == [None if w is None else {k: w[k] for k in ("kind", "username", "ip")} for w in expected]
    mapped = {json.loads(l)["event_id"]: parse_replay_line(l).kind for l in lines if parse_replay_line(l)}
    assert mapped[540] is EventKind.LOGIN
    assert mapped[538] is EventKind.LOGOFF
    assert mapped[529] is EventKind.FAILED_LOGIN


BRUTE = load_correlation_rules(CORRELATION_XML)[0]


@pytest.mark.acceptance("3 brute-force threshold")
def test_two_failures_no_block_third_blocks():
    eng = CorrelationEngine([BRUTE])
    assert eng.observe(failed("10.0.0.8", 0), at(0)) == []
    assert eng.observe(failed("10.0.0.8", 30), at(30)) == []
    assert eng.active_blocks(at(31)) == []
    (entry,) = eng.observe(failed("10.0.0.8", 59), at(59))
    assert entry.ip == IPv4Address("10.0.0.8") and entry.rule_id == "bruteforce"


@pytest.mark.acceptance("3 brute-force threshold")
def test_threshold_1000_sequences():
    rng = rng_for(3)
    for case in range(1000):
        count = rng.randint(2, 6)
        window = rng.randint(1, 120)
        t, times = 0, []
        for _ in range(rng.randint(0, 40)):
            t += rng.choice([0, 1, rng.randint(0, window), rng.randint(0, 3 * window)])
            times.append(t)
        rule = CorrelationRule("t", Mode.THRESHOLD, (EventPredicate(EventKind.FAILED_LOGIN),),
                               count=count, window=timedelta(seconds=window))
        eng = CorrelationEngine([rule])
        got = [k for k, s in enumerate(times) if eng.observe(failed("10.9.9.9", s), at(s))]
        want = threshold_fires([at(s) for s in times], count, timedelta(seconds=window))
        assert got == want, (case, count, window, times)


@pytest.mark.acceptance("4 packet decisions match linear-scan oracle")
def test_oracle_equivalence():
    mismatches = 0
    for seed in range(100):
        rng = rng_for(10_000 + seed)
        rs = compile_policy(random_policy(rng), random_snapshot(rng), random_blocks(rng), generation=1)
        fw = FirewallBackend()
        fw.install(rs)
        prepared = prepare(rs.rules)
        for _ in range(10_000):
            query = random_query(rng, rs)
            d = fw.evaluate(query)
            want = linear_scan(prepared, query)
            if (d.action, d.matched_priority, d.origin_rule_id) != (want.action, want.priority, want.origin_rule_id):
                mismatches += 1
    assert mismatches == 0


def _random_event(rng, table):
    kind = rng.choice(["login", "login", "logoff", "logoff-held", "failed"])
    held = sorted(table.snapshot().bindings, key=lambda b: int(b.ip))
    if kind == "logoff-held" and held:
        b = rng.choice(held)
        return logoff(b.username, str(b.ip))
    ip = str(rng.choice(held).ip) if held and rng.random() < 0.4 else str(random_ip(rng))
    if kind == "failed":
        return failed(ip)
    user = rng.choice(USERS)
    return login(user, ip) if kind.startswith("login") else logoff(user, ip)


@pytest.mark.acceptance("5 compiler determinism and incremental equivalence")
def test_compiler_determinism_and_incremental():
    for seed in range(500):
        rng = rng_for(50_000 + seed)
        policy, snap, blocks = random_policy(rng), random_snapshot(rng), random_blocks(rng)
        gen = rng.randint(1, 100)
        assert emit_text(compile_policy(policy, snap, blocks, gen)) == emit_text(compile_policy(policy, snap, blocks, gen))

        table = IdentityTable()
        for b in sorted(snap.bindings, key=lambda b: int(b.ip)):
            table.apply_event(login(b.username, str(b.ip)), at(0))
        rc = Recompiler(gen)
        current = compile_policy(policy, table.snapshot(), blocks, gen)
        change = table.apply_event(_random_event(rng, table), at(1))
        new = rc.recompile_on_change(change, policy, table.snapshot(), blocks)
        if new is None:
            assert not change
            new = current
        fresh = compile_policy(policy, table.snapshot(), blocks, rc.generation)
        assert emit_text(new) == emit_text(fresh), seed


@pytest.mark.acceptance("6 logoff and lease cleanup")
def test_login_logoff_equals_never_logged_in(single_rule_policy):
    p = Pipeline(single_rule_policy, clock=lambda: at(0))
    p.process(login(ALICE, "10.0.0.5"))
    assert any(r.origin_rule_id == "r1" for r in p.backend.ruleset.rules)
    p.process(logoff(ALICE, "10.0.0.5", 1))
    assert p.backend.ruleset.rules == compile_policy(single_rule_policy, EMPTY).rules


@pytest.mark.acceptance("6 logoff and lease cleanup")
def test_lease_expiry_real_time(single_rule_policy):
    p = Pipeline(single_rule_policy, lease=timedelta(seconds=2))
    p.process(login(ALICE, "10.0.0.5"))
    assert any(r.origin_rule_id == "r1" for r in p.backend.ruleset.rules)
    time.sleep(3)
    p.sweep()
    assert p.backend.ruleset.rules == compile_policy(single_rule_policy, EMPTY).rules


X = "10.20.0.7"
FIVE = (
    IdentityRule("alice-web", Action.PERMIT, ALICE, IPv4Network("10.1.0.10/32"), Service(Proto.TCP, 443)),
    IdentityRule("alice-all", Action.PERMIT, ALICE, IPv4Network("0.0.0.0/0")),
    L3Rule("lan-any", Action.PERMIT, IPv4Network("10.20.0.0/16"), IPv4Network("0.0.0.0/0")),
    L3Rule("dns", Action.PERMIT, IPv4Network("0.0.0.0/0"), IPv4Network("10.1.0.53/32"), Service(Proto.UDP, 53)),
    IdentityRule("bob-ssh", Action.DENY, "CORP\\bob", IPv4Network("10.1.0.22/32"), Service(Proto.TCP, 22)),
)


def _probes_from_x():
    rng = rng_for(7)
    src = IPv4Address(X)
    fixed = [(IPv4Address("10.1.0.10"), Proto.TCP, 443), (IPv4Address("10.1.0.53"), Proto.UDP, 53),
             (IPv4Address("10.1.0.22"), Proto.TCP, 22), (IPv4Address("8.8.8.8"), Proto.UDP, 123)]
    out = [PacketQuery(src, *f) for f in fixed]
    out += [PacketQuery(src, random_ip(rng), rng.choice([Proto.TCP, Proto.UDP]), rng.randint(1, 65535))
            for _ in range(60)]
    return out


@pytest.mark.acceptance("7 block precedes identity permits")
def test_block_precedence_all_permutations():
    probes = _probes_from_x()
    checked = 0
    for order in itertools.permutations(FIVE):
        policy = MetaPolicy(1, order, Action.PERMIT)
        p = Pipeline(policy, [BRUTE], clock=lambda: at(0))
        p.process(login(ALICE, X))
        # the binding really does permit before the block
        assert p.backend.evaluate(probes[0]).action is Action.PERMIT
        for t in range(3):
            p.process(failed(X, t))
        for q in probes:
            d = p.backend.evaluate(q)
            assert (d.action, d.origin_rule_id) == (Action.DENY, BLOCK_ORIGIN), (order, q)
            checked += 1
    assert checked == 120 * len(probes)


def _decoy_body(rng, user):
    decoys = [".".join(str(rng.randint(0, 255)) for _ in range(4)) for _ in range(rng.randint(1, 4))]
    host = rng.choice(["gw", decoys[0], f"[{decoys[-1]}]"])
    tmpl = rng.choice([
        "<38>Jan  1 10:00:00 {h} sshd[{pid}]: Accepted password for {u} from {d} port {port} ssh2",
        "<86>{h} sshd[{pid}]: Accepted publickey for {u} from {d} port {port} ssh2 src={d2}",
        "{h} {d2} sshd[{pid}]: Accepted keyboard-interactive/pam for {u} from {d} port {port} ssh2 ip={d}",
    ])
    body = tmpl.format(h=host, pid=rng.randint(1, 99999), u=user, d=" ".join(decoys), d2=decoys[-1],
                       port=rng.randint(1, 65535))
    return body.encode()


@pytest.mark.acceptance("8 syslog binding uses sender address")
def test_syslog_sender_ip_over_udp(single_rule_policy):
    rng = rng_for(8)
    p = Pipeline(single_rule_policy, syslog_bind=("127.0.0.1", 0), sweep_interval=timedelta(hours=1)).start()
    try:
        addr = p.listener.address
        sent = {}
        for i in range(200):
            sender = IPv4Address(f"127.{1 + i // 250}.{i % 250}.{rng.randint(2, 254)}")
            user = f"fz{i}"
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
                s.bind((str(sender), 0))
                s.sendto(_decoy_body(rng, user), addr)
            sent[user] = sender
        deadline = time.monotonic() + 10
        while p.listener.stats.received < 200 and time.monotonic() < deadline:
            time.sleep(0.02)
        p.wait_idle()
        bindings = {b.username: b.ip for b in p.table.snapshot().bindings}
    finally:
        p.stop()
    assert p.listener.stats.errors == 0
    assert bindings == sent
