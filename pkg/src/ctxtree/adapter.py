"""Pluggable LLM boundary.

Everything that needs a language model goes through an object with a
``complete(request) -> AdapterVerdict`` method. Two implementations ship:

* :class:`StubAdapter` replays a fixed script and records every request.
  It never touches the network and is what the test suite uses.
* :class:`HttpChatAdapter` talks to any OpenAI-style ``/chat/completions``
  endpoint configured through environment variables (see CONFIG.md).

:func:`run_tool_loop` drives multi-turn tool use on top of either.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Union

from .errors import AdapterTimeout, AdapterUnavailable, ScriptExhausted, ToolValidationError

logger = logging.getLogger(__name__)

TIER3_MAX_TOKENS = 1024
TIER3_TEMPERATURE = 0.3
TIER4_MAX_TOKENS = 2048
TIER4_TEMPERATURE = 0.5
MAX_TOOL_ITERATIONS = 50
INSUFFICIENT_CONTEXT_MARKER = "INSUFFICIENT_CONTEXT"

TOOL_NAMES = frozenset({"search_knowledge", "read_entry", "list_tree", "curate"})


def count_tokens(text: str) -> int:
    """Default token counter: whitespace-delimited words."""
    return len(text.split())


def truncate_tokens(text: str, max_tokens: int) -> str:
    if max_tokens <= 0:
        return ""
    words = 0
    in_word = False
    for i, ch in enumerate(text):
        if ch.isspace():
            in_word = False
        elif not in_word:
            in_word = True
            words += 1
            if words > max_tokens:
                return text[:i].rstrip()
    return text


class VerdictKind(str, enum.Enum):
    ANSWER = "answer"
    INSUFFICIENT_CONTEXT = "insufficient_context"
    TOOL_CALL = "tool_call"


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_output_tokens: int
    temperature: float
    tools: tuple[str, ...] = ()
    purpose: str = ""

    def __post_init__(self) -> None:
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError("temperature must be in [0, 1]")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AdapterVerdict:
    kind: VerdictKind
    text: str = ""
    tool_call: ToolCall | None = None

    @classmethod
    def answer(cls, text: str) -> AdapterVerdict:
        return cls(VerdictKind.ANSWER, text=text)

    @classmethod
    def insufficient(cls) -> AdapterVerdict:
        return cls(VerdictKind.INSUFFICIENT_CONTEXT)

    @classmethod
    def call(cls, name: str, **arguments: Any) -> AdapterVerdict:
        return cls(VerdictKind.TOOL_CALL, tool_call=ToolCall(name, arguments))

    def capped(self, max_tokens: int) -> AdapterVerdict:
        if self.kind is VerdictKind.ANSWER:
            return AdapterVerdict(self.kind, truncate_tokens(self.text, max_tokens))
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind.value}
        if self.text:
            out["text"] = self.text
        if self.tool_call is not None:
            out["tool"] = self.tool_call.name
            out["arguments"] = dict(self.tool_call.arguments)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AdapterVerdict:
        kind = VerdictKind(data["kind"])
        if kind is VerdictKind.TOOL_CALL:
            return cls.call(data["tool"], **dict(data.get("arguments", {})))
        return cls(kind, text=data.get("text", ""))


class LLMAdapter(Protocol):
    def complete(self, request: CompletionRequest) -> AdapterVerdict: ...


ScriptItem = Union[AdapterVerdict, Exception, Callable[[CompletionRequest], AdapterVerdict]]


class StubAdapter:
    """Deterministic adapter that replays `script` one item per call.

    Items are verdicts, exceptions (raised when reached) or callables that
    build a verdict from the request.
    """

    def __init__(self, script: Iterable[ScriptItem] = ()) -> None:
        self._script = list(script)
        self._pos = 0
        self._lock = threading.Lock()
        self.requests: list[CompletionRequest] = []

    @property
    def calls(self) -> int:
        return len(self.requests)

    @property
    def remaining(self) -> int:
        return len(self._script) - self._pos

    def complete(self, request: CompletionRequest) -> AdapterVerdict:
        with self._lock:
            self.requests.append(request)
            if self._pos >= len(self._script):
                raise ScriptExhausted(f"stub script exhausted after {self._pos} calls")
            item = self._script[self._pos]
            self._pos += 1
        if isinstance(item, Exception):
            raise item
        verdict = item(request) if callable(item) else item
        return verdict.capped(request.max_output_tokens)

    @classmethod
    def from_json(cls, items: Iterable[Mapping[str, Any]]) -> StubAdapter:
        script: list[ScriptItem] = []
        for item in items:
            if item.get("kind") == "timeout":
                script.append(AdapterTimeout("scripted timeout"))
            elif item.get("kind") == "echo":
                script.append(echo_prompt)
            else:
                script.append(AdapterVerdict.from_dict(item))
        return cls(script)


def echo_prompt(request: CompletionRequest) -> AdapterVerdict:
    """Script helper: answer with the prompt itself (what the model was shown)."""
    return AdapterVerdict.answer(request.prompt)


class HttpChatAdapter:
    """Client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls, environ: Mapping[str, str] = os.environ) -> HttpChatAdapter | None:
        base = environ.get("CTXTREE_LLM_BASE_URL")
        model = environ.get("CTXTREE_LLM_MODEL")
        if not base or not model:
            return None
        return cls(base, model, environ.get("CTXTREE_LLM_API_KEY"),
                   float(environ.get("CTXTREE_LLM_TIMEOUT", "10")))

    def _tool_schema(self, name: str) -> dict:
        spec = DEFAULT_TOOL_SCHEMAS[name]
        return {"type": "function", "function": {"name": name, **spec}}

    def complete(self, request: CompletionRequest) -> AdapterVerdict:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }
        if request.tools:
            body["tools"] = [self._tool_schema(t) for t in request.tools if t in DEFAULT_TOOL_SCHEMAS]
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(f"{self.base_url}/chat/completions",
                                     data=json.dumps(body).encode(), headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.load(resp)
        except (socket.timeout, TimeoutError) as exc:
            raise AdapterTimeout(str(exc)) from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise AdapterTimeout(str(exc)) from exc
            raise AdapterUnavailable(str(exc)) from exc
        try:
            message = payload["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as exc:
            raise AdapterUnavailable(f"unexpected response shape: {payload!r}") from exc
        calls = message.get("tool_calls") or []
        if calls:
            fn = calls[0]["function"]
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"_raw": fn.get("arguments")}
            return AdapterVerdict.call(fn["name"], **args)
        text = (message.get("content") or "").strip()
        if text == INSUFFICIENT_CONTEXT_MARKER:
            return AdapterVerdict.insufficient()
        return AdapterVerdict.answer(text).capped(request.max_output_tokens)


# ---------------------------------------------------------------------------
# Tool loop
# ---------------------------------------------------------------------------

DEFAULT_TOOL_SCHEMAS: dict[str, dict] = {
    "search_knowledge": {
        "description": "Full-text search over the context tree.",
        "parameters": {"type": "object", "properties": {"query": {"type": "string"}},
                       "required": ["query"]},
    },
    "read_entry": {
        "description": "Read one knowledge entry by its tree-relative path.",
        "parameters": {"type": "object", "properties": {"path": {"type": "string"}},
                       "required": ["path"]},
    },
    "list_tree": {
        "description": "List the domains and topics of the context tree.",
        "parameters": {"type": "object", "properties": {}},
    },
    "curate": {
        "description": "Apply ADD/UPDATE/UPSERT/MERGE/DELETE operations to the context tree.",
        "parameters": {"type": "object", "properties": {"operations": {"type": "array"}},
                       "required": ["operations"]},
    },
}


@dataclass(frozen=True)
class ToolSpec:
    name: str
    handler: Callable[..., Any]
    # argument name -> expected python type(s)
    params: Mapping[str, type | tuple[type, ...]] = field(default_factory=dict)
    required: tuple[str, ...] = ()

    def validate(self, arguments: Mapping[str, Any]) -> dict[str, Any]:
        if not isinstance(arguments, Mapping):
            raise ToolValidationError(f"{self.name}: arguments must be an object")
        missing = [k for k in self.required if k not in arguments]
        if missing:
            raise ToolValidationError(f"{self.name}: missing argument(s) {', '.join(missing)}")
        unknown = [k for k in arguments if k not in self.params]
        if unknown:
            raise ToolValidationError(f"{self.name}: unknown argument(s) {', '.join(unknown)}")
        for key, value in arguments.items():
            if not isinstance(value, self.params[key]):
                raise ToolValidationError(f"{self.name}: argument {key!r} has the wrong type")
        return dict(arguments)


@dataclass
class TranscriptEvent:
    kind: str  # request | verdict | tool_result | error
    payload: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.payload}


@dataclass
class ToolLoopResult:
    answer: str
    transcript: list[TranscriptEvent]
    iterations: int
    incomplete: bool = False
    tool_calls: list[ToolCall] = field(default_factory=list)


def _render_prompt(system: str, question: str, observations: list[str]) -> str:
    parts = [system.strip(), f"Question: {question}"] if system else [f"Question: {question}"]
    parts.extend(observations)
    return "\n\n".join(parts)


def _render_result(result: Any) -> str:
    if isinstance(result, str):
        return result
    return json.dumps(result, ensure_ascii=False, default=str)


def run_tool_loop(adapter: LLMAdapter, question: str, tools: Mapping[str, ToolSpec], *,
                  max_iterations: int = MAX_TOOL_ITERATIONS,
                  max_output_tokens: int = TIER4_MAX_TOKENS,
                  temperature: float = TIER4_TEMPERATURE,
                  system: str = "", purpose: str = "tool_loop") -> ToolLoopResult:
    """Alternate model verdicts and tool executions until an answer or the cap."""
    for name in tools:
        if name not in TOOL_NAMES:
            raise ValueError(f"unknown tool {name!r}")
    transcript: list[TranscriptEvent] = []
    observations: list[str] = []
    calls: list[ToolCall] = []
    last_result = ""
    for iteration in range(1, max_iterations + 1):
        request = CompletionRequest(_render_prompt(system, question, observations),
                                    max_output_tokens, temperature, tuple(tools), purpose)
        transcript.append(TranscriptEvent("request", {"iteration": iteration,
                                                      "maxTokens": max_output_tokens,
                                                      "temperature": temperature}))
        try:
            verdict = adapter.complete(request)
        except AdapterTimeout as exc:
            transcript.append(TranscriptEvent("error", {"iteration": iteration,
                                                        "error": f"timeout: {exc}"}))
            observations.append(f"[error] model call timed out: {exc}")
            continue
        transcript.append(TranscriptEvent("verdict", {"iteration": iteration, **verdict.to_dict()}))
        if verdict.kind is VerdictKind.ANSWER:
            return ToolLoopResult(verdict.text, transcript, iteration, False, calls)
        if verdict.kind is VerdictKind.INSUFFICIENT_CONTEXT:
            msg = "insufficient_context is not a valid reply here; use tools or answer"
            transcript.append(TranscriptEvent("error", {"iteration": iteration, "error": msg}))
            observations.append(f"[error] {msg}")
            continue
        call = verdict.tool_call
        assert call is not None
        calls.append(call)
        spec = tools.get(call.name)
        try:
            if spec is None:
                raise ToolValidationError(f"unknown tool {call.name!r}")
            args = spec.validate(call.arguments)
            result = spec.handler(**args)
        except ToolValidationError as exc:
            transcript.append(TranscriptEvent("error", {"iteration": iteration, "tool": call.name,
                                                        "error": str(exc)}))
            observations.append(f"[error] {exc}")
            continue
        except Exception as exc:  # tool failures are observations, not crashes
            logger.warning("tool %s failed: %s", call.name, exc)
            transcript.append(TranscriptEvent("error", {"iteration": iteration, "tool": call.name,
                                                        "error": f"{type(exc).__name__}: {exc}"}))
            observations.append(f"[error] {call.name} failed: {exc}")
            continue
        last_result = _render_result(result)
        transcript.append(TranscriptEvent("tool_result", {"iteration": iteration, "tool": call.name,
                                                          "result": last_result}))
        observations.append(f"[{call.name}] {last_result}")
    return ToolLoopResult(truncate_tokens(last_result, max_output_tokens), transcript,
                          max_iterations, True, calls)


class DeadlineAdapter:
    """Wrap an adapter so each completion must finish within `timeout` seconds.

    A call that overruns is abandoned (its worker thread finishes in the
    background) and reported as :class:`AdapterTimeout`.
    """

    def __init__(self, inner: LLMAdapter, timeout: float) -> None:
        self.inner = inner
        self.timeout = timeout

    def complete(self, request: CompletionRequest) -> AdapterVerdict:
        if self.timeout <= 0:
            return self.inner.complete(request)
        box: dict[str, Any] = {}
        done = threading.Event()

        def target() -> None:
            try:
                box["verdict"] = self.inner.complete(request)
            except BaseException as exc:  # re-raised in the caller thread
                box["error"] = exc
            finally:
                done.set()

        threading.Thread(target=target, name="adapter-call", daemon=True).start()
        if not done.wait(self.timeout):
            raise AdapterTimeout(f"no response within {self.timeout:g}s")
        if "error" in box:
            raise box["error"]
        return box["verdict"]
