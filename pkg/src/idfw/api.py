"""HTTP interface of a running daemon.

Read endpoints expose the identity table, the active ruleset, blocks and
counters; ``POST /query`` evaluates a packet against the live ruleset and
``POST /events`` injects an authentication event into the pipeline queue.
"""
from __future__ import annotations

from datetime import datetime, timezone
from ipaddress import IPv4Address
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .backend import NoPolicy, PacketQuery
from .compiler import emit_text
from .events import EventKind, SessionEvent
from .pipeline import Pipeline, utcnow


class BindingModel(BaseModel):
    username: str
    ip: IPv4Address
    login_ts: datetime
    lease_expiry: datetime


class StateModel(BaseModel):
    version: int
    bindings: list[BindingModel]


class EventModel(BaseModel):
    kind: Literal["login", "logoff", "failed-login", "system"]
    username: str = ""
    ip: IPv4Address
    ts: Optional[datetime] = None
    source: str = "api"
    event_id: Optional[int] = None


class QueryModel(BaseModel):
    src: IPv4Address
    dst: IPv4Address
    proto: Literal["tcp", "udp"]
    dport: int = Field(ge=1, le=65535)


class DecisionModel(BaseModel):
    action: Literal["permit", "deny"]
    matched_priority: int
    origin_rule_id: str
    generation: int


class RulesetModel(BaseModel):
    generation: int
    policy_version: int
    snapshot_version: int
    text: str


class BlockModel(BaseModel):
    ip: IPv4Address
    expires: datetime
    rule_id: str


class StatsModel(BaseModel):
    generation: int
    events: int
    installs: int
    errors: int
    sweeps: int
    bindings: int


def create_app(pipeline: Pipeline) -> FastAPI:
    app = FastAPI(title="idfw", version="0.1.0")

    @app.get("/health")
    def health():
        return {"status": "ok", "generation": pipeline.backend.generation}

    @app.get("/state", response_model=StateModel)
    def state():
        return pipeline.table.snapshot().to_dict()

    @app.get("/ruleset", response_model=RulesetModel)
    def ruleset():
        rs = pipeline.backend.ruleset
        if rs is None:
            raise HTTPException(503, "no ruleset installed")
        return RulesetModel(
            generation=rs.generation,
            policy_version=rs.compiled_from[0],
            snapshot_version=rs.compiled_from[1],
            text=emit_text(rs),
        )

    @app.post("/query", response_model=DecisionModel)
    def query(body: QueryModel):
        try:
            decision = pipeline.backend.evaluate(PacketQuery(body.src, body.dst, body.proto, body.dport))
        except NoPolicy as exc:
            raise HTTPException(503, str(exc))
        return DecisionModel(
            action=decision.action.value,
            matched_priority=decision.matched_priority,
            origin_rule_id=decision.origin_rule_id,
            generation=decision.generation,
        )

    @app.post("/events", status_code=202)
    def events(body: EventModel):
        kind = EventKind(body.kind)
        if kind in (EventKind.LOGIN, EventKind.LOGOFF) and not body.username.strip():
            raise HTTPException(422, f"{kind.value} events need a username")
        ts = body.ts or utcnow()
        if ts.tzinfo is None:
            ts = ts.replace(tzinfo=timezone.utc)
        pipeline.submit(SessionEvent(kind, body.username, body.ip, ts, body.source, body.event_id))
        return {"queued": True}

    @app.get("/blocks", response_model=list[BlockModel])
    def blocks():
        return [BlockModel(ip=b.ip, expires=b.expires, rule_id=b.rule_id)
                for b in pipeline.correlation.active_blocks(utcnow())]

    @app.get("/stats", response_model=StatsModel)
    def stats():
        s = pipeline.stats
        return StatsModel(
            generation=pipeline.backend.generation,
            events=s.events,
            installs=s.installs,
            errors=s.errors,
            sweeps=s.sweeps,
            bindings=len(pipeline.table),
        )

    return app
