"""Independent reference implementations used to check the engine.

Deliberately naive: string/ipaddress based, no shared helpers with the
code under test beyond the plain data classes.
"""
import random
from datetime import timedelta
from ipaddress import IPv4Address, IPv4Network, ip_address, ip_network

from idfw.identity import IdentityBinding, IdentitySnapshot
from idfw.policy import Action, IdentityRule, L3Rule, MetaPolicy, Proto, Service

from conftest import T0


def expand_by_hand(policy, bindings, blocks):
    """Rule tuples (prio, action, src, dst, proto, dport, origin, user) for a compile."""
    out = []
    for ip in sorted({str(b) for b in blocks}, key=lambda s: tuple(int(o) for o in s.split("."))):
        out.append(("deny", f"{ip}/32", "0.0.0.0/0", "any", None, "__block__", None))
    for rule in policy.rules:
        if hasattr(rule, "user"):
            mine = [str(b.ip) for b in bindings if b.username.strip().lower() == rule.user.strip().lower()]
            for ip in sorted(mine, key=lambda s: tuple(int(o) for o in s.split("."))):
                out.append((rule.action.value, f"{ip}/32", str(rule.destination), rule.service.proto.value,
                            rule.service.port, rule.id, rule.user))
        else:
            out.append((rule.action.value, str(rule.source), str(rule.destination), rule.service.proto.value,
                        rule.service.port, rule.id, None))
    out.append((policy.default_action.value, "0.0.0.0/0", "0.0.0.0/0", "any", None, "__default__", None))
    return [(10 * (i + 1),) + row for i, row in enumerate(out)]


def as_tuples(ruleset):
    return [
        (r.priority, r.action.value, str(r.src), str(r.dst), r.proto.value, r.dport, r.origin_rule_id, r.origin_user)
        for r in ruleset.rules
    ]


def prepare(rules):
    """Pre-parse a rule list for :func:`linear_scan`."""
    return [(ip_network(str(r.src)), ip_network(str(r.dst)), r) for r in sorted(rules, key=lambda r: r.priority)]


def linear_scan(rules, query):
    """First match using ipaddress containment. ``rules`` may be prepared."""
    prepared = rules if rules and isinstance(rules[0], tuple) else prepare(rules)
    src, dst = ip_address(str(query.src)), ip_address(str(query.dst))
    for src_net, dst_net, r in prepared:
        if src not in src_net or dst not in dst_net:
            continue
        if r.proto.value != "any" and r.proto.value != query.proto.value:
            continue
        if r.dport is not None and r.dport != query.dport:
            continue
        return r
    return None


def threshold_fires(times, count, window):
    """Indices at which a count-in-window rule fires, with reset after firing.

    Recounts the window from scratch at every event.
    """
    fired = []
    start = 0
    for k, t in enumerate(times):
        in_window = [u for u in times[start:k + 1] if t - u <= window]
        if len(in_window) >= count:
            fired.append(k)
            start = k + 1
    return fired


# random instance generators

USERS = ["CORP\\alice", "CORP\\bob", "CORP\\carol", "CORP\\dave", "CORP\\erin"]


def random_net(rng, pool_bits=24):
    plen = rng.choice([0, 8, 16, 24, 28, 30, 32, 32, 32])
    base = IPv4Address("10.0.0.0") if rng.random() < 0.8 else IPv4Address(rng.getrandbits(32))
    addr = (int(base) + rng.getrandbits(pool_bits)) & 0xFFFFFFFF
    return IPv4Network((addr, plen), strict=False)


def random_service(rng):
    proto = rng.choice(list(Proto))
    port = rng.choice([None, 22, 80, 443, 8080, rng.randint(1, 65535)])
    return Service(proto, port)


def random_policy(rng, n_rules=None):
    n_rules = rng.randint(0, 10) if n_rules is None else n_rules
    rules = []
    for i in range(n_rules):
        action = rng.choice(list(Action))
        if rng.random() < 0.6:
            rules.append(IdentityRule(f"r{i}", action, rng.choice(USERS), random_net(rng), random_service(rng)))
        else:
            rules.append(L3Rule(f"g{i}", action, random_net(rng), random_net(rng), random_service(rng)))
    return MetaPolicy(rng.randint(1, 3), tuple(rules), rng.choice(list(Action)))


def random_ip(rng):
    return IPv4Address(int(IPv4Address("10.0.0.0")) + rng.getrandbits(24)) if rng.random() < 0.9 \
        else IPv4Address(rng.getrandbits(32))


def random_snapshot(rng, max_bindings=8):
    by_ip = {}
    for _ in range(rng.randint(0, max_bindings)):
        ip = random_ip(rng)
        by_ip[ip] = IdentityBinding(rng.choice(USERS), ip, T0, T0 + timedelta(hours=10))
    return IdentitySnapshot.from_bindings(by_ip.values(), rng.randint(0, 50))


def random_blocks(rng, max_blocks=3):
    return [random_ip(rng) for _ in range(rng.randint(0, max_blocks))]


def random_query(rng, ruleset=None):
    from idfw.backend import PacketQuery

    if ruleset is not None and ruleset.rules and rng.random() < 0.6:
        # aim at a rule so non-default branches get exercised
        r = rng.choice(ruleset.rules)
        src = IPv4Address(int(r.src.network_address) + rng.randrange(r.src.num_addresses))
        dst = IPv4Address(int(r.dst.network_address) + rng.randrange(r.dst.num_addresses))
        proto = Proto(rng.choice(["tcp", "udp"])) if r.proto is Proto.ANY else r.proto
        dport = r.dport if r.dport is not None and rng.random() < 0.8 else rng.randint(1, 65535)
        return PacketQuery(src, dst, proto, dport)
    return PacketQuery(random_ip(rng), random_ip(rng), Proto(rng.choice(["tcp", "udp"])),
                       rng.choice([22, 80, 443, 8080, rng.randint(1, 65535)]))


def rng_for(seed):
    return random.Random(seed)
