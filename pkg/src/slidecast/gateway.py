"""Chat-completion gateway: OpenAI-compatible HTTP client plus a scripted mock.

Both backends are reached through :class:`Gateway`, which adds the
in-flight limiter, transport retries and JSON extraction/repair.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import httpx

from slidecast.errors import (
    AuthError,
    BackendRefused,
    GatewayError,
    MockScriptMiss,
    PreconditionError,
    TransportError,
    UnparseableOutput,
)
from slidecast.ingest import ImageAsset

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "PASS_API_KEY"
DEFAULT_API_BASE_ENV = "PASS_API_BASE"

MAX_ATTEMPTS = 3
BACKOFF_SECONDS = (0.5, 1.0, 2.0)
DEFAULT_REPAIR_ATTEMPTS = 2

REPAIR_INSTRUCTION = (
    "Your previous reply could not be used: {problem}. "
    "Reply again with only the requested JSON value. "
    "No explanations, no Markdown code fences."
)


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


class BackendKind(str, Enum):
    HTTP = "http_openai_compatible"
    MOCK = "scripted_mock"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    text: str
    attachments: tuple[ImageAsset, ...] = ()

    def __post_init__(self) -> None:
        if not self.text and not self.attachments:
            raise ValueError("a chat message needs text or attachments")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    wants_json: bool = False

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.messages[0].role is Role.ASSISTANT:
            raise ValueError("the first message must be a system or user message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def extended(self, *messages: ChatMessage) -> "ChatRequest":
        return ChatRequest(
            self.model_id,
            self.messages + tuple(messages),
            self.temperature,
            self.max_tokens,
            self.wants_json,
        )


def prompt_request(
    model_id: str,
    prompt: str,
    *,
    system: Optional[str] = None,
    attachments: Sequence[ImageAsset] = (),
    temperature: float = 0.0,
    max_tokens: int = 2048,
    wants_json: bool = True,
) -> ChatRequest:
    messages = []
    if system:
        messages.append(ChatMessage(Role.SYSTEM, system))
    messages.append(ChatMessage(Role.USER, prompt, tuple(attachments)))
    return ChatRequest(model_id, tuple(messages), temperature, max_tokens, wants_json)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: Usage = field(default_factory=Usage)


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    base_url: Optional[str] = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0
    max_in_flight: int = 4
    mock_script: Optional[Path] = None
    json_mode: bool = True

    def __post_init__(self) -> None:
        if (self.base_url is not None) != (self.kind is BackendKind.HTTP):
            raise ValueError("base_url is required for the HTTP backend and only for it")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be positive")


def fingerprint(request: ChatRequest) -> str:
    """Stable key over model, roles, texts and attachment ids.

    Sampling settings are deliberately excluded so a script keyed on a
    prompt keeps matching when only the temperature changes.
    """
    canonical = {
        "model": request.model_id,
        "messages": [
            {"role": m.role.value, "text": m.text, "attachments": [a.id for a in m.attachments]}
            for m in request.messages
        ],
    }
    blob = json.dumps(canonical, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    # surrogatepass keeps lone surrogates hashable; valid text encodes as plain UTF-8
    return hashlib.sha256(blob.encode("utf-8", "surrogatepass")).hexdigest()[:32]


# -- backends ---------------------------------------------------------------------


class _Retryable(Exception):
    """Raised by a backend for failures worth another attempt."""


class HttpChatBackend:
    """POST <base_url>/chat/completions with a bearer credential from the environment."""

    def __init__(self, config: BackendConfig, transport: Optional[httpx.BaseTransport] = None):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def _credential(self) -> str:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise AuthError(f"credential environment variable {self.config.api_key_env} is not set")
        return key

    def _scrub(self, text: str, key: str) -> str:
        return text.replace(key, "***") if key else text

    @staticmethod
    def _message_payload(msg: ChatMessage) -> dict:
        if not msg.attachments:
            return {"role": msg.role.value, "content": msg.text}
        parts: list[dict] = []
        if msg.text:
            parts.append({"type": "text", "text": msg.text})
        for img in msg.attachments:
            b64 = base64.b64encode(img.data).decode("ascii")
            parts.append({"type": "image_url", "image_url": {"url": f"data:{img.media_type};base64,{b64}"}})
        return {"role": msg.role.value, "content": parts}

    def payload(self, request: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [self._message_payload(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.wants_json and self.config.json_mode:
            body["response_format"] = {"type": "json_object"}
        return body

    def send(self, request: ChatRequest) -> ChatResponse:
        key = self._credential()
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(
                url,
                json=self.payload(request),
                headers={"Authorization": f"Bearer {key}"},
            )
        except httpx.TransportError as exc:
            raise _Retryable(f"{type(exc).__name__}: {self._scrub(str(exc), key)}") from None

        if resp.status_code in (401, 403):
            raise AuthError(f"backend rejected the credential (status {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"status {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRefused(resp.status_code, self._scrub(resp.text[:300], key))
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError, AttributeError):
            raise BackendRefused(resp.status_code, self._scrub(resp.text[:300], key)) from None

        raw_finish = choice.get("finish_reason") or "stop"
        finish = {
            "stop": FinishReason.STOP,
            "tool_calls": FinishReason.STOP,
            "length": FinishReason.LENGTH,
        }.get(raw_finish, FinishReason.ERROR)
        if finish is FinishReason.STOP and not text:
            finish = FinishReason.ERROR
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            finish_reason=finish,
            usage=Usage(int(usage.get("prompt_tokens") or 0), int(usage.get("completion_tokens") or 0)),
        )

    def close(self) -> None:
        self._client.close()


def request_text(request: ChatRequest) -> str:
    return "\n".join(m.text for m in request.messages)


def _script_reply(value: Any) -> str | list[str]:
    if isinstance(value, list):
        return [v if isinstance(v, str) else json.dumps(v, ensure_ascii=False) for v in value]
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


@dataclass
class _Rule:
    contains: tuple[str, ...]
    responses: list[str]


class ScriptedMock:
    """Deterministic offline backend.

    Lookup order: exact fingerprint, then the first rule whose substrings
    all occur in the request text, then the default. A response may be a
    list, consumed in order per (entry, opening prompt) with the last item
    repeating; this is how repair sequences are scripted.
    """

    def __init__(
        self,
        responses: Optional[dict[str, str | list[str]]] = None,
        rules: Sequence[tuple[Sequence[str], str | list[str]]] = (),
        default: Optional[str] = None,
        responder: Optional[Callable[[ChatRequest], str]] = None,
    ):
        self.responses = {k: _as_list(v) for k, v in (responses or {}).items()}
        self.rules = [_Rule(tuple(c), _as_list(r)) for c, r in rules]
        self.default = default
        self.responder = responder
        self.calls: list[ChatRequest] = []
        self._counters: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedMock":
        """Load ``{"responses": {fp: reply}, "rules": [{"contains": [...], "response": reply}], "default": reply}``.

        A reply is a string, a JSON object (sent serialized), or a list of
        such replies consumed in turn. A reply that is itself a JSON array
        must be given as a string.
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = []
        for rule in data.get("rules", []):
            contains = rule["contains"]
            if isinstance(contains, str):
                contains = [contains]
            rules.append((contains, _script_reply(rule["response"])))
        responses = {fp: _script_reply(r) for fp, r in (data.get("responses") or {}).items()}
        default = data.get("default")
        if default is not None:
            default = _script_reply(default)
            if isinstance(default, list):
                raise ValueError("the mock default must be a single reply")
        return cls(responses=responses, rules=rules, default=default)

    def _next(self, key: str, request: ChatRequest, options: list[str]) -> str:
        opening = next((m.text for m in request.messages if m.role is Role.USER), "")
        counter_key = (key, hashlib.sha256(opening.encode("utf-8")).hexdigest())
        n = self._counters.get(counter_key, 0)
        self._counters[counter_key] = n + 1
        return options[min(n, len(options) - 1)]

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
            fp = fingerprint(request)
            if fp in self.responses:
                text = self._next("fp:" + fp, request, self.responses[fp])
            else:
                haystack = request_text(request)
                for i, rule in enumerate(self.rules):
                    if all(s in haystack for s in rule.contains):
                        text = self._next(f"rule:{i}", request, rule.responses)
                        break
                else:
                    if self.responder is not None:
                        text = self.responder(request)
                    elif self.default is not None:
                        text = self.default
                    else:
                        raise MockScriptMiss(fp)
        finish = FinishReason.STOP if text else FinishReason.ERROR
        return ChatResponse(text=text, finish_reason=finish)

    def close(self) -> None:
        pass


def _as_list(value: str | list[str]) -> list[str]:
    if isinstance(value, list):
        if not value:
            raise ValueError("scripted response list must not be empty")
        return [v if isinstance(v, str) else json.dumps(v, ensure_ascii=False) for v in value]
    return [value]


# -- JSON extraction --------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


def extract_json(raw: str) -> Any:
    """Return the first balanced JSON value in ``raw``.

    Fenced blocks are tried first, then every ``{`` or ``[`` position in
    the remaining text. Raises ValueError when nothing decodes.
    """
    decoder = json.JSONDecoder()
    candidates = [m.group(1) for m in _FENCE_RE.finditer(raw)] + [raw]
    for text in candidates:
        for i, ch in enumerate(text):
            if ch in "{[":
                try:
                    value, _ = decoder.raw_decode(text, i)
                except json.JSONDecodeError:
                    continue
                return value
    raise ValueError("no JSON value found")


# -- gateway ------------------------------------------------------------------------


class Gateway:
    """Retrying, concurrency-limited front for one backend."""

    def __init__(
        self,
        config: BackendConfig,
        backend: Any = None,
        *,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        if backend is None:
            if config.kind is BackendKind.HTTP:
                backend = HttpChatBackend(config, transport=transport)
            elif config.mock_script is not None:
                backend = ScriptedMock.from_file(config.mock_script)
            else:
                raise PreconditionError("scripted_mock backend needs a mock script")
        self.backend = backend
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    @classmethod
    def mock(cls, mock: ScriptedMock, max_in_flight: int = 4) -> "Gateway":
        return cls(BackendConfig(BackendKind.MOCK, max_in_flight=max_in_flight), backend=mock)

    def complete(self, request: ChatRequest) -> ChatResponse:
        last = ""
        for attempt in range(1, MAX_ATTEMPTS + 1):
            with self._slots:
                try:
                    return self.backend.send(request)
                except _Retryable as exc:
                    last = str(exc)
            logger.warning("transport failure on attempt %d/%d: %s", attempt, MAX_ATTEMPTS, last)
            if attempt < MAX_ATTEMPTS:
                self._sleep(BACKOFF_SECONDS[attempt - 1])
        raise TransportError(f"giving up after {MAX_ATTEMPTS} attempts: {last}", attempts=MAX_ATTEMPTS)

    def complete_json(
        self,
        request: ChatRequest,
        shape_check: Callable[[Any], bool] = lambda _v: True,
        max_repair_attempts: int = DEFAULT_REPAIR_ATTEMPTS,
    ) -> Any:
        """Complete and parse JSON, re-prompting up to ``max_repair_attempts`` times."""
        if max_repair_attempts < 0:
            raise PreconditionError("max_repair_attempts must be >= 0")
        if not request.wants_json:
            request = ChatRequest(request.model_id, request.messages, request.temperature,
                                  request.max_tokens, wants_json=True)
        raw = ""
        for attempt in range(max_repair_attempts + 1):
            response = self.complete(request)
            raw = response.text
            try:
                value = extract_json(raw)
            except ValueError:
                problem = "it did not contain valid JSON"
                if response.finish_reason is FinishReason.LENGTH:
                    problem = "it was cut off before the JSON was complete"
            else:
                if shape_check(value):
                    return value
                problem = "the JSON did not have the requested structure"
            if attempt == max_repair_attempts:
                break
            logger.info("repairing model output (attempt %d): %s", attempt + 1, problem)
            followups = []
            if raw:
                followups.append(ChatMessage(Role.ASSISTANT, raw))
            followups.append(ChatMessage(Role.USER, REPAIR_INSTRUCTION.format(problem=problem)))
            request = request.extended(*followups)
        raise UnparseableOutput(raw, attempts=max_repair_attempts + 1)

    def close(self) -> None:
        self.backend.close()


def complete(config: BackendConfig, request: ChatRequest) -> ChatResponse:
    gw = Gateway(config)
    try:
        return gw.complete(request)
    finally:
        gw.close()


def complete_json(
    config: BackendConfig,
    request: ChatRequest,
    shape_check: Callable[[Any], bool] = lambda _v: True,
    max_repair_attempts: int = DEFAULT_REPAIR_ATTEMPTS,
) -> Any:
    gw = Gateway(config)
    try:
        return gw.complete_json(request, shape_check, max_repair_attempts)
    finally:
        gw.close()


def is_str_list(value: Any) -> bool:
    return isinstance(value, list) and all(isinstance(v, str) for v in value)


__all__ = [
    "BackendConfig",
    "BackendKind",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "FinishReason",
    "Gateway",
    "GatewayError",
    "HttpChatBackend",
    "Role",
    "ScriptedMock",
    "Usage",
    "complete",
    "complete_json",
    "extract_json",
    "fingerprint",
    "is_str_list",
    "prompt_request",
]
