"""Provider-agnostic chat boundary, prompt contracts and a scripted mock provider."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from string import Template
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx
import jsonschema
import yaml

from .bt import BehaviorTree, parse_bt
from .errors import (
    AuthError,
    GatewayError,
    GatewayTimeout,
    MalformedResponse,
    MalformedVerdict,
    MockUnmatchedError,
    PlanParseError,
    RateLimitError,
)
from .vocabulary import DEFAULT_SPACE, StrategySpace

log = logging.getLogger(__name__)

KEY_ENV = "BTREFLEX_LLM_KEY"
TRANSPORT_RETRIES = 2


@dataclass(frozen=True)
class ChatRequest:
    system: str
    messages: tuple[tuple[str, str], ...]
    contract: str = ""
    max_tokens: int = 2048
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for role, _ in self.messages:
            if role not in ("user", "assistant"):
                raise ValueError(f"bad message role {role!r}")

    def digest(self) -> str:
        blob = json.dumps([self.contract, self.system, self.messages], ensure_ascii=False)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def text(self) -> str:
        return "\n".join(t for _, t in self.messages)

    def followup(self, reply: str, message: str) -> ChatRequest:
        msgs = (*self.messages, ("assistant", reply), ("user", message))
        return ChatRequest(self.system, msgs, self.contract, self.max_tokens, self.temperature)


class Provider(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> str: ...


# -- mock ------------------------------------------------------------------------------


@dataclass
class MockEntry:
    response: str
    contract: str | None = None
    contains: tuple[str, ...] = ()
    regex: str | None = None
    times: int | None = None  # None = reusable forever
    used: int = 0

    def matches(self, request: ChatRequest) -> bool:
        if self.times is not None and self.used >= self.times:
            return False
        if self.contract is not None and self.contract != request.contract:
            return False
        # only the latest user turn is matched so that retries can be scripted separately
        text = request.messages[-1][1]
        if any(s not in text for s in self.contains):
            return False
        return self.regex is None or re.search(self.regex, text) is not None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MockEntry:
        match = d.get("match") or {}
        contains = match.get("contains", ())
        if isinstance(contains, str):
            contains = (contains,)
        return cls(str(d["response"]), match.get("contract"), tuple(contains), match.get("regex"), d.get("times"))


class MockProvider:
    """Replays canned responses; entries are tried in order and the first live match answers."""

    name = "mock"

    def __init__(self, entries: Sequence[MockEntry] = (), strict: bool = True) -> None:
        self.entries = list(entries)
        self.strict = strict
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> MockProvider:
        return cls([MockEntry.from_dict(e) for e in data.get("entries", ())], bool(data.get("strict", True)))

    @classmethod
    def from_file(cls, path: str | Path) -> MockProvider:
        text = Path(path).read_text(encoding="utf-8")
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        return cls.from_mapping(data or {})

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls.append(request)
            for entry in self.entries:
                if entry.matches(request):
                    entry.used += 1
                    return entry.response
        if self.strict:
            raise MockUnmatchedError(f"no scripted response for request {request.digest()} ({request.contract})")
        return ""


# -- http ------------------------------------------------------------------------------


class TokenBucket:
    def __init__(self, rate: float, capacity: float = 1.0, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep) -> None:
        self.rate, self.capacity = rate, capacity
        self.tokens = capacity
        self.clock, self.sleep = clock, sleep
        self.stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                self.sleep((1 - self.tokens) / self.rate)


class HttpProvider:
    """OpenAI-compatible chat-completions endpoint. The credential comes from the environment only."""

    name = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        client: httpx.Client | None = None,
        timeout: float = 60.0,
        requests_per_second: float = 1.0,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.client = client or httpx.Client(timeout=timeout)
        self.bucket = TokenBucket(requests_per_second, sleep=sleep)
        self.backoff = backoff
        self.sleep = sleep
        self._inflight = threading.Semaphore(1)

    def _key(self) -> str:
        key = os.environ.get(KEY_ENV)
        if not key:
            raise AuthError(f"environment variable {KEY_ENV} is not set")
        return key

    def complete(self, request: ChatRequest) -> str:
        body = {
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "system", "content": request.system}]
            + [{"role": r, "content": t} for r, t in request.messages],
        }
        headers = {"Authorization": f"Bearer {self._key()}"}
        digest = request.digest()
        for attempt in range(TRANSPORT_RETRIES + 1):
            self.bucket.acquire()
            try:
                with self._inflight:
                    resp = self.client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
            except httpx.TimeoutException as exc:
                log.warning("request %s timed out (attempt %d)", digest, attempt + 1)
                if attempt == TRANSPORT_RETRIES:
                    raise GatewayTimeout(f"request {digest} timed out after {attempt + 1} attempts") from exc
                self.sleep(self.backoff * 2**attempt)
                continue
            except httpx.HTTPError as exc:
                log.error("request %s transport error: %s", digest, exc)
                raise GatewayError(f"request {digest}: {exc}") from exc
            return self._parse(resp, digest)
        raise AssertionError("unreachable")

    def _parse(self, resp: httpx.Response, digest: str) -> str:
        if resp.status_code in (401, 403):
            log.error("request %s rejected: auth", digest)
            raise AuthError(f"request {digest}: HTTP {resp.status_code}")
        if resp.status_code == 429:
            log.error("request %s rejected: rate limit", digest)
            raise RateLimitError(f"request {digest}: HTTP 429")
        if resp.status_code >= 400:
            log.error("request %s failed: HTTP %d", digest, resp.status_code)
            raise GatewayError(f"request {digest}: HTTP {resp.status_code}")
        try:
            return str(resp.json()["choices"][0]["message"]["content"])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"request {digest}: unexpected response body") from exc


def send(request: ChatRequest, provider: Provider) -> str:
    return provider.complete(request)


# -- contracts ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptContract:
    name: str
    system: str
    template: str
    response_schema: Mapping[str, Any] | None = None
    error: type[MalformedResponse] = MalformedResponse

    def render(self, **slots: Any) -> ChatRequest:
        try:
            text = Template(self.template).substitute({k: str(v) for k, v in slots.items()})
        except KeyError as exc:
            raise ValueError(f"contract {self.name}: slot {exc.args[0]!r} not filled") from None
        return ChatRequest(self.system, (("user", text),), self.name)


def extract_json(text: str) -> Any:
    """First JSON object in the reply, tolerating code fences and chatter around it."""
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fenced:
        text = fenced.group(1)
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in response")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    return obj


def extract_xml(text: str) -> str:
    fenced = re.search(r"```(?:xml)?\s*(.*?)```", text, re.S)
    return (fenced.group(1) if fenced else text).strip()


_NULLABLE_INT = {"type": ["integer", "null"]}

VERDICT_SCHEMA = {
    "type": "object",
    "required": ["outcome", "explanation", "fault_index"],
    "properties": {
        "outcome": {"enum": ["Success", "PlanFailure", "ExecutionFailure"]},
        "explanation": {"type": "string"},
        "fault_index": _NULLABLE_INT,
    },
}

ANALYSIS_SCHEMA = {
    "type": "object",
    "required": ["flaws"],
    "properties": {
        "flaws": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "description"],
                "properties": {
                    "layer": {"enum": ["action", "logic", "mission"]},
                    "node_id": {"type": ["string", "null"]},
                    "description": {"type": "string", "minLength": 1},
                },
            },
        }
    },
}

REPAIR_SCHEMA = {
    "type": "object",
    "required": ["verb", "anchor", "payload", "rationale"],
    "properties": {
        "verb": {"enum": ["InsertNode", "DeleteNode", "ReplaceNode", "ReorderChildren", "WrapWithDecorator", "RetargetParams"]},
        "anchor": {"type": "string"},
        "payload": {},
        "rationale": {"type": "string", "minLength": 1},
    },
}

SYNTAX_SPEC = (
    "Write the plan as BehaviorTree XML. The root element is <BehaviorTree> with exactly one child. "
    "Leaves are self-closing tags named after an action or condition, with parameters as attributes. "
    "An attribute value of the form {key} reads that key from the blackboard at tick time."
)

PLAN_GENERATION = PromptContract(
    "plan_generation",
    "You plan drone missions as behavior trees. Reply with XML only.",
    "$syntax\n\nAvailable nodes:\n$node_docs\n\nExample plan:\n$one_shot\n\n"
    "Lessons from earlier missions:\n$experiences\n\nScene: $context\n\nTask: $instruction\n",
)

OUTCOME_EVALUATION = PromptContract(
    "outcome_evaluation",
    "You judge whether a drone completed its task by reading the whole flight narrative, not just where it ended.",
    "Task: $instruction\n\nFlight narrative:\n$narrative\n\n"
    'Reply with JSON {"outcome": "Success" | "PlanFailure" | "ExecutionFailure", '
    '"explanation": text, "fault_index": j or null} where j is the subscript of t_j at which the first faulty action completed.',
    VERDICT_SCHEMA,
    MalformedVerdict,
)

HIERARCHICAL_ANALYSIS = PromptContract(
    "hierarchical_analysis",
    "You find flaws in drone behavior-tree plans at the action, logic and mission layers.",
    "Task: $instruction\n\nPlan:\n$plan\n\nFlight narrative:\n$narrative\n\nVerdict: $verdict\n\n"
    'Reply with JSON {"flaws": [{"layer": "action" | "logic" | "mission", "node_id": id or null, "description": text}]}.',
    ANALYSIS_SCHEMA,
)

REPAIR_PROPOSAL = PromptContract(
    "repair_proposal",
    "You repair behavior-tree plans with one node-level edit drawn from the allowed node set.",
    "Plan:\n$plan\n\nFlaw ($layer layer, node $node_id): $description\n\nAllowed nodes:\n$node_docs\n\n"
    'Reply with JSON {"verb": one of InsertNode, DeleteNode, ReplaceNode, ReorderChildren, WrapWithDecorator, '
    'RetargetParams, "anchor": node id, "payload": see below, "rationale": text}.\n'
    "InsertNode payload {\"xml\": fragment, \"position\": child index}; ReplaceNode payload {\"xml\": fragment} "
    "or {\"kind\": control kind}; ReorderChildren payload {\"order\": [child ids]}; WrapWithDecorator payload "
    '{"decorator": name, "params": {}}; RetargetParams payload {"params": {}}; DeleteNode payload null.\n',
    REPAIR_SCHEMA,
)

CONTRACTS = {c.name: c for c in (PLAN_GENERATION, OUTCOME_EVALUATION, HIERARCHICAL_ANALYSIS, REPAIR_PROPOSAL)}


@dataclass
class Gateway:
    """Sends contract requests and enforces each contract's schema gate."""

    provider: Provider
    log: list[tuple[str, str]] = field(default_factory=list)  # (digest, contract) of every send

    def send(self, request: ChatRequest) -> str:
        self.log.append((request.digest(), request.contract))
        try:
            return send(request, self.provider)
        except GatewayError as exc:
            log.error("contract %s request %s failed: %s", request.contract, request.digest(), exc)
            raise

    def ask_json(self, contract: PromptContract, request: ChatRequest, validator: Callable[[Any], None] | None = None) -> Any:
        """Send, parse and validate; one retry with the error appended, then raise the contract's error."""
        for attempt in range(2):
            reply = self.send(request)
            try:
                obj = extract_json(reply)
                if contract.response_schema is not None:
                    jsonschema.validate(obj, contract.response_schema)
                if validator is not None:
                    validator(obj)
                return obj
            except (ValueError, jsonschema.ValidationError) as exc:
                msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
                if attempt == 1:
                    raise contract.error(f"{contract.name}: {msg}") from exc
                request = request.followup(reply, f"Your reply was rejected: {msg}. Reply again with valid JSON only.")
        raise AssertionError("unreachable")

    def call(self, name: str, **slots: Any) -> Any:
        contract = CONTRACTS[name]
        return self.ask_json(contract, contract.render(**slots))


def render_experiences(experiences: Sequence[Any]) -> str:
    if not experiences:
        return "(none)"
    return "\n".join(f"- [{e.stratum}] {e.operation.describe()}: {e.rationale}" for e in experiences)


def generate_plan(
    instruction: str,
    node_docs: str,
    one_shot: str,
    retrieved: Sequence[Any],
    gateway: Gateway,
    context: str = "",
    space: StrategySpace = DEFAULT_SPACE,
) -> BehaviorTree:
    """Ask for a plan; a parse failure is retried once with the parser error quoted."""
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    request = PLAN_GENERATION.render(
        syntax=SYNTAX_SPEC,
        node_docs=node_docs,
        one_shot=one_shot,
        experiences=render_experiences(retrieved),
        context=context or "(none)",
        instruction=instruction,
    )
    for attempt in range(2):
        reply = gateway.send(request)
        try:
            return parse_bt(extract_xml(reply), space)
        except PlanParseError as exc:
            if attempt == 1:
                raise
            quoted = f"{type(exc).__name__}: {exc}"
            request = request.followup(reply, f"The plan was rejected by the parser with {quoted}. Reply with corrected XML only.")
    raise AssertionError("unreachable")


__all__ = [name for name in dir() if not name.startswith("_")]
