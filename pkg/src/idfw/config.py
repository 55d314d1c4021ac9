"""Daemon configuration: one YAML file, overridable by command-line flags.

Example::

    policy: policy.xml
    syslog:
      bind: 0.0.0.0:5514
      patterns:
        - {name: sshd-accepted, regex: 'Accepted \\S+ for (?P<user>\\S+) from ', kind: login}
    replay:
      path: events.jsonl
    eventlog:
      id_map: {login: [540, 4624], logoff: [538, 4634], failed: [529, 4625]}
    identity:
      lease: 10h
      sweep_interval: 30s
    correlation:
      rules_path: correlation.xml
    installer:
      rule_file: /var/lib/idfw/rules.txt
    api:
      bind: 127.0.0.1:8787
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Any, Mapping

import yaml

from .events import DEFAULT_PATTERNS, EventIdMap, SyslogPattern
from .identity import DEFAULT_LEASE
from .timeutil import parse_duration

ENV_CONFIG = "IDFW_CONFIG"


class ConfigError(ValueError):
    pass


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
        raise ConfigError(f"expected host:port, got {text!r}")
    return host or "0.0.0.0", int(port)


@dataclass
class PipelineConfig:
    policy_path: Path | None = None
    correlation_path: Path | None = None
    replay_path: Path | None = None
    rule_file: Path | None = None
    syslog_bind: tuple[str, int] | None = None
    syslog_patterns: tuple[SyslogPattern, ...] = DEFAULT_PATTERNS
    id_map: EventIdMap = field(default_factory=EventIdMap)
    lease: timedelta = DEFAULT_LEASE
    sweep_interval: timedelta = timedelta(seconds=30)
    api_bind: tuple[str, int] = ("127.0.0.1", 8787)
    batch_window: timedelta = timedelta(0)
    bench_timeout: timedelta = timedelta(seconds=10)
    bench_poll: timedelta = timedelta(milliseconds=1)
    bench_repeat: int = 3

    def validate(self, require_policy: bool = True) -> None:
        problems = []
        if require_policy and self.policy_path is None:
            problems.append("no policy file configured")
        for name in ("policy_path", "correlation_path", "replay_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                problems.append(f"{name}: {path} does not exist")
        if self.rule_file is not None and not Path(self.rule_file).parent.is_dir():
            problems.append(f"rule_file: directory of {self.rule_file} does not exist")
        for name in ("lease", "sweep_interval", "bench_timeout", "bench_poll"):
            if getattr(self, name) <= timedelta(0):
                problems.append(f"{name} must be positive")
        if self.bench_repeat < 1:
            problems.append("bench_repeat must be >= 1")
        if self.batch_window < timedelta(0):
            problems.append("batch_window must not be negative")
        if problems:
            raise ConfigError("; ".join(problems))


# dotted config key -> (field name, converter)
_KEYS: dict[str, tuple[str, Any]] = {
    "policy": ("policy_path", Path),
    "correlation.rules_path": ("correlation_path", Path),
    "replay.path": ("replay_path", Path),
    "installer.rule_file": ("rule_file", Path),
    "syslog.bind": ("syslog_bind", parse_hostport),
    "syslog.patterns": ("syslog_patterns", lambda v: tuple(SyslogPattern.from_config(p) for p in v)),
    "eventlog.id_map": ("id_map", EventIdMap.from_config),
    "identity.lease": ("lease", parse_duration),
    "identity.sweep_interval": ("sweep_interval", parse_duration),
    "api.bind": ("api_bind", parse_hostport),
    "pipeline.batch_window": ("batch_window", parse_duration),
    "bench.timeout": ("bench_timeout", parse_duration),
    "bench.poll": ("bench_poll", parse_duration),
    "bench.repeat": ("bench_repeat", int),
}


def _flatten(data: Mapping, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and dotted not in _KEYS:
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def build_config(
    data: Mapping | None = None,
    overrides: Mapping[str, Any] | None = None,
    base_dir: Path | None = None,
) -> PipelineConfig:
    """Build a config from nested ``data``; dotted ``overrides`` win.

    Relative paths in ``data`` resolve against ``base_dir``; override
    paths are taken as given (relative to the working directory).
    """
    cfg = PipelineConfig()
    for source, rebase in ((_flatten(data or {}), base_dir), (overrides or {}, None)):
        for key, value in source.items():
            if value is None:
                continue
            if key not in _KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            name, convert = _KEYS[key]
            try:
                converted = convert(value)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            if isinstance(converted, Path) and rebase is not None and not converted.is_absolute():
                converted = rebase / converted
            setattr(cfg, name, converted)
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Read ``path`` (or ``$IDFW_CONFIG``); a missing path means defaults."""
    path = path or os.environ.get(ENV_CONFIG)
    data, base = {}, None
    if path:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        base = path.parent
    return build_config(data, overrides, base)

