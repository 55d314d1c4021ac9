"""Agentless identity-based firewall engine."""
from .backend import Decision, FirewallBackend, NoPolicy, PacketQuery, StaleGeneration
from .compiler import ConcreteRule, ConcreteRuleset, Recompiler, compile_policy, emit_text
from .correlation import BlockEntry, CorrelationEngine, CorrelationRule, load_correlation_rules
from .events import EventKind, ParseError, SessionEvent, parse_replay_line, parse_syslog_datagram
from .identity import ChangeSummary, IdentityBinding, IdentitySnapshot, IdentityTable
from .pipeline import Pipeline
from .policy import MetaPolicy, PolicyValidationError, parse_meta_policy

__version__ = "0.1.0"
