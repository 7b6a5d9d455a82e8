"""Uniform interface to the LLM-backed agents.

Five roles (Proposer, Validator, Investigator, Extractor, Judge) are
served through one ``call(request) -> response`` port. Each request kind
has a registered role and response shape; payloads that do not validate
are protocol errors, so the engine never parses free-form model output.

Request kinds
-------------
Proposer:      propose_probes, revise_probes, propose_schema, revise_schema
Validator:     judge_relevance, score_extraction
Investigator:  suggest_refinements
Extractor:     extract_freeform, extract_with_schema (schema trials),
               extract_records (bulk sweep)
Judge:         judge_record

The two schema-bound extractor kinds are deliberately distinct: scripted
runs consume one entry stream per (role, kind), and keeping trial
extraction separate from the bulk sweep keeps those streams aligned when
a run is resumed mid-pipeline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import requests

from .errors import ConfigError, OracleProtocolError, OracleTransportError
from .judge_axes import AXIS_KEYS

logger = logging.getLogger(__name__)


class AgentRole(Enum):
    PROPOSER = "Proposer"
    VALIDATOR = "Validator"
    INVESTIGATOR = "Investigator"
    EXTRACTOR = "Extractor"
    JUDGE = "Judge"


def _require(payload: dict, key: str, types: tuple[type, ...], kind: str):
    if key not in payload:
        raise OracleProtocolError(f"{kind} response missing {key!r}")
    if not isinstance(payload[key], types):
        raise OracleProtocolError(
            f"{kind} response field {key!r} has type {type(payload[key]).__name__}")
    return payload[key]


def _check_probes(payload: dict, kind: str) -> None:
    probes = _require(payload, "probes", (list,), kind)
    for i, probe in enumerate(probes):
        if not isinstance(probe, dict) or "probe_id" not in probe or "spec" not in probe:
            raise OracleProtocolError(f"{kind} response probes[{i}] must be {{probe_id, spec}}")


def _check_schema(payload: dict, kind: str) -> None:
    fields = _require(payload, "fields", (list,), kind)
    for i, f in enumerate(fields):
        if not isinstance(f, dict) or "name" not in f or "kind" not in f:
            raise OracleProtocolError(f"{kind} response fields[{i}] must carry name and kind")
    _require(payload, "task_instantiation", (str,), kind)


def _check_records(payload: dict, kind: str) -> None:
    records = _require(payload, "records", (list,), kind)
    for i, record in enumerate(records):
        if not isinstance(record, dict) or not isinstance(record.get("fields"), dict):
            raise OracleProtocolError(f"{kind} response records[{i}] must carry a fields object")


def _check_bool(key: str) -> Callable[[dict, str], None]:
    def check(payload: dict, kind: str) -> None:
        _require(payload, key, (bool,), kind)
    return check


def _check_suggestions(payload: dict, kind: str) -> None:
    suggestions = _require(payload, "suggestions", (list,), kind)
    if not all(isinstance(s, str) for s in suggestions):
        raise OracleProtocolError(f"{kind} response suggestions must be strings")


def _check_axes(payload: dict, kind: str) -> None:
    axes = _require(payload, "axes", (dict,), kind)
    missing = set(AXIS_KEYS) - set(axes)
    if missing:
        raise OracleProtocolError(f"{kind} response missing axes {sorted(missing)}")
    for key in AXIS_KEYS:
        if not isinstance(axes[key], bool):
            raise OracleProtocolError(f"{kind} response axis {key!r} must be a boolean")


KIND_REGISTRY: dict[str, tuple[AgentRole, Callable[[dict, str], None]]] = {
    "propose_probes": (AgentRole.PROPOSER, _check_probes),
    "revise_probes": (AgentRole.PROPOSER, _check_probes),
    "propose_schema": (AgentRole.PROPOSER, _check_schema),
    "revise_schema": (AgentRole.PROPOSER, _check_schema),
    "judge_relevance": (AgentRole.VALIDATOR, _check_bool("relevant")),
    "score_extraction": (AgentRole.VALIDATOR, _check_bool("pass")),
    "suggest_refinements": (AgentRole.INVESTIGATOR, _check_suggestions),
    "extract_freeform": (AgentRole.EXTRACTOR, _check_records),
    "extract_with_schema": (AgentRole.EXTRACTOR, _check_records),
    "extract_records": (AgentRole.EXTRACTOR, _check_records),
    "judge_record": (AgentRole.JUDGE, _check_axes),
}


@dataclass(frozen=True)
class OracleRequest:
    role: AgentRole
    kind: str
    payload: dict

    def __post_init__(self):
        entry = KIND_REGISTRY.get(self.kind)
        if entry is None:
            raise ConfigError(f"unknown oracle request kind {self.kind!r}")
        if entry[0] is not self.role:
            raise ConfigError(
                f"request kind {self.kind!r} belongs to {entry[0].value}, not {self.role.value}")


@dataclass(frozen=True)
class OracleResponse:
    payload: dict
    verbatim: str


def validate_response_payload(kind: str, payload: dict) -> None:
    if not isinstance(payload, dict):
        raise OracleProtocolError(f"{kind} response payload is not an object")
    KIND_REGISTRY[kind][1](payload, kind)


def _digest(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


class Oracle:
    """Port every agent interaction goes through."""

    def call(self, request: OracleRequest) -> OracleResponse:
        raise NotImplementedError


class FunctionOracle(Oracle):
    """Adapter wrapping a plain function ``payload -> payload``; handy for
    ground-truth validators in tests and for in-process agents."""

    def __init__(self, fn: Callable[[OracleRequest], dict]):
        self._fn = fn

    def call(self, request: OracleRequest) -> OracleResponse:
        payload = self._fn(request)
        validate_response_payload(request.kind, payload)
        return OracleResponse(payload=payload,
                              verbatim=json.dumps(payload, sort_keys=True))


class ScriptedOracle(Oracle):
    """Deterministic replay oracle.

    The script is a JSON array of ``{role, kind, match?, response}``
    entries. Entries form one FIFO stream per (role, kind); a call
    consumes the first unconsumed entry in its stream whose ``match`` keys
    (if any) all equal the corresponding request payload values. Running a
    stream dry is a loud protocol error, never a silent default.
    """

    def __init__(self, entries: list[dict]):
        self._lock = threading.Lock()
        self._streams: dict[tuple[str, str], list[dict]] = {}
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or "role" not in entry or "kind" not in entry:
                raise ConfigError(f"script entry {i} must carry role and kind")
            role = str(entry["role"])
            kind = str(entry["kind"])
            if kind not in KIND_REGISTRY:
                raise ConfigError(f"script entry {i} has unknown kind {kind!r}")
            match = entry.get("match") or {}
            if not isinstance(match, dict):
                raise ConfigError(f"script entry {i} match must be an object")
            response = entry.get("response")
            if not isinstance(response, dict):
                raise ConfigError(f"script entry {i} response must be an object")
            self._streams.setdefault((role, kind), []).append(
                {"match": match, "response": response, "used": False})

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedOracle":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"oracle script not found: {path}")
        entries = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(entries, list):
            raise ConfigError("oracle script must be a JSON array")
        return cls(entries)

    def call(self, request: OracleRequest) -> OracleResponse:
        stream_key = (request.role.value, request.kind)
        with self._lock:
            for entry in self._streams.get(stream_key, ()):
                if entry["used"]:
                    continue
                if all(request.payload.get(k) == v for k, v in entry["match"].items()):
                    entry["used"] = True
                    payload = entry["response"]
                    validate_response_payload(request.kind, payload)
                    return OracleResponse(payload=payload,
                                          verbatim=json.dumps(payload, sort_keys=True))
        raise OracleProtocolError(
            f"script exhausted for ({request.role.value}, {request.kind})")


class HttpOracle(Oracle):
    """Live oracle: POST {role, kind, payload} to a configured endpoint.

    Bearer token comes from an environment variable so credentials stay
    out of run configs. Transport failures and malformed bodies are
    retried with exponential backoff; after the final attempt the last
    failure class decides between transport and protocol error.
    """

    def __init__(self, url: str, token_env: str = "LITMINE_ORACLE_TOKEN",
                 timeout: float = 60.0, retries: int = 3, backoff: float = 0.5):
        self.url = url
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def call(self, request: OracleRequest) -> OracleResponse:
        body = {"role": request.role.value, "kind": request.kind,
                "payload": request.payload}
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(self.url, json=body, headers=self._headers(),
                                     timeout=self.timeout)
                resp.raise_for_status()
                verbatim = resp.text
                payload = resp.json()
                if isinstance(payload, dict) and "payload" in payload:
                    payload = payload["payload"]
                validate_response_payload(request.kind, payload)
                return OracleResponse(payload=payload, verbatim=verbatim)
            except (requests.exceptions.JSONDecodeError, OracleProtocolError,
                    ValueError) as exc:
                # JSONDecodeError subclasses RequestException; classify it
                # as a protocol problem, not transport.
                last_exc = OracleProtocolError(
                    f"oracle at {self.url} returned an invalid body: {exc}")
            except requests.RequestException as exc:
                last_exc = OracleTransportError(
                    f"oracle at {self.url} unreachable: {exc}")
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * (2 ** attempt))
        assert last_exc is not None
        raise last_exc


class RoleRouter(Oracle):
    """Dispatch requests to a different backend per role."""

    def __init__(self, routes: dict[AgentRole, Oracle]):
        self._routes = routes

    def call(self, request: OracleRequest) -> OracleResponse:
        oracle = self._routes.get(request.role)
        if oracle is None:
            raise ConfigError(f"no oracle configured for role {request.role.value}")
        return oracle.call(request)


@dataclass
class AuditEntry:
    seq: int
    role: str
    kind: str
    payload_digest: str
    response_digest: str

    def to_dict(self) -> dict:
        return {"seq": self.seq, "role": self.role, "kind": self.kind,
                "payload_digest": self.payload_digest,
                "response_digest": self.response_digest}


@dataclass
class AuditLog:
    """Append-only trace of every oracle call, digest-keyed for replay."""

    entries: list[AuditEntry] = field(default_factory=list)

    def record(self, request: OracleRequest, response: OracleResponse) -> None:
        self.entries.append(AuditEntry(
            seq=len(self.entries),
            role=request.role.value,
            kind=request.kind,
            payload_digest=_digest(request.payload),
            response_digest=_digest(response.payload),
        ))

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")


class AuditingOracle(Oracle):
    """Wrapper appending every successful call to an audit log."""

    def __init__(self, inner: Oracle, log: AuditLog):
        self.inner = inner
        self.log = log
        self._lock = threading.Lock()

    def call(self, request: OracleRequest) -> OracleResponse:
        response = self.inner.call(request)
        with self._lock:
            self.log.record(request, response)
        return response
