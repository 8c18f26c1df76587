"""Chat-completion transport with retries, templating, and strict parsing.

One generic client serves both the vision (attribute extraction, with an
image payload) and text (query generation) roles; only the prompt templates
differ.  Hermetic runs install a :class:`ScriptedTransport` instead of the
HTTP transport.  Credentials are read from the environment at call time and
never appear in logs or error messages.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from typing import Any, Callable, Mapping, Protocol, Sequence

from .errors import KlpError

log = logging.getLogger(__name__)


class TransportError(KlpError):
    """The request never produced a usable HTTP response."""


class RequestTimeoutError(TransportError):
    """The endpoint did not answer within the configured timeout."""


class AuthenticationError(KlpError):
    """The endpoint rejected the credential (401/403); never retried."""


class RetriesExhaustedError(KlpError):
    def __init__(self, attempts: int, last_error: str):
        self.attempts = attempts
        super().__init__(f"gave up after {attempts} attempts: {last_error}")


class ResponseParseError(KlpError):
    """A reply arrived but its content is not usable; carries the payload."""

    def __init__(self, message: str, payload: str | None = None):
        self.payload = payload
        super().__init__(message)


@dataclass(frozen=True)
class ClientConfig:
    endpoint_url: str
    api_key_env_var: str
    model_name: str
    timeout: float = 30.0
    max_retries: int = 2
    max_in_flight: int = 4
    backoff_base: float = 0.5
    backoff_multiplier: float = 2.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be positive")


@dataclass(frozen=True)
class PromptTemplate:
    """System text plus a user template with ``{{name}}`` placeholders."""

    system_text: str
    user_template: str
    few_shot_examples: tuple[tuple[str, str], ...] = ()

    def render(self, **bindings: str) -> str:
        text = self.user_template
        for name, value in bindings.items():
            text = text.replace("{{" + name + "}}", str(value))
        if "{{" in text:
            start = text.index("{{")
            raise ValueError(f"unbound placeholder near {text[start:start + 30]!r}")
        if not text.strip():
            raise ValueError("rendered prompt is empty")
        return text


class Transport(Protocol):
    def send(
        self, url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout: float
    ) -> tuple[int, str]: ...


class HttpTransport:
    """POST JSON over urllib; returns (status, body_text)."""

    def send(self, url, headers, payload, timeout):
        data = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(url, data=data, method="POST")
        for name, value in headers.items():
            request.add_header(name, value)
        request.add_header("Content-Type", "application/json")
        try:
            with urllib.request.urlopen(request, timeout=timeout) as response:
                return response.status, response.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read().decode("utf-8", errors="replace")
        except TimeoutError as exc:
            raise RequestTimeoutError(f"request timed out after {timeout}s") from exc
        except urllib.error.URLError as exc:
            raise TransportError(f"request failed: {exc.reason}") from exc


class ScriptedTransport:
    """Deterministic offline transport replaying a scripted response list.

    Each script entry is either ``(status, body)`` or an exception to raise.
    Requests are recorded for assertions.
    """

    def __init__(self, script: Sequence[tuple[int, str] | Exception]):
        self._script = list(script)
        self.requests: list[dict] = []

    def send(self, url, headers, payload, timeout):
        self.requests.append({"url": url, "payload": payload})
        if not self._script:
            raise AssertionError("scripted transport ran out of replies")
        step = self._script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


def scripted_reply(content: str) -> tuple[int, str]:
    """Wrap plain content in the chat-completion envelope for scripts."""
    return 200, json.dumps({"choices": [{"message": {"content": content}}]})


class ChatClient:
    """Blocking chat-completion client with exponential-backoff retries."""

    def __init__(
        self,
        config: ClientConfig,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.transport = transport if transport is not None else HttpTransport()
        self._sleep = sleep
        # shareable across workers; bounds concurrent in-flight requests
        self._in_flight = threading.Semaphore(config.max_in_flight)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env_var, "")
        if not key:
            raise AuthenticationError(
                f"environment variable {self.config.api_key_env_var!r} is not set"
            )
        return key

    def _redact(self, text: str, key: str) -> str:
        return text.replace(key, "[redacted]") if key else text

    def chat_complete(self, prompt: str, image_payload: str | None = None) -> str:
        """Send one prompt and return the first choice's content.

        Retries transport failures and 5xx statuses up to ``max_retries``
        times with exponentially growing delays; 401/403 fail immediately.
        """
        key = self._api_key()
        content: Any = prompt
        if image_payload is not None:
            content = [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": image_payload}},
            ]
        payload = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
        }
        headers = {"Authorization": f"Bearer {key}"}
        attempts = self.config.max_retries + 1
        delay = self.config.backoff_base
        last_error = "no attempt made"
        for attempt in range(attempts):
            if attempt > 0:
                self._sleep(delay)
                delay *= self.config.backoff_multiplier
            try:
                with self._in_flight:
                    status, body = self.transport.send(
                        self.config.endpoint_url, headers, payload, self.config.timeout
                    )
            except TransportError as exc:
                last_error = str(exc)
                log.warning("attempt %d failed: %s", attempt + 1, self._redact(last_error, key))
                continue
            if status in (401, 403):
                raise AuthenticationError(f"endpoint rejected the credential (HTTP {status})")
            if status >= 500:
                last_error = f"HTTP {status}"
                log.warning("attempt %d failed: HTTP %d", attempt + 1, status)
                continue
            if status != 200:
                raise TransportError(f"unexpected HTTP {status}: {self._redact(body, key)[:200]}")
            log.debug("chat completion ok on attempt %d", attempt + 1)
            return _extract_content(body)
        raise RetriesExhaustedError(attempts, self._redact(last_error, key))


def _extract_content(body: str) -> str:
    try:
        envelope = json.loads(body)
        content = envelope["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError):
        raise ResponseParseError(
            "response is not a chat-completion envelope", payload=body
        ) from None
    if not isinstance(content, str):
        raise ResponseParseError("message content is not text", payload=body)
    return content


# ---------------------------------------------------------------------------
# Structured-output parsing
# ---------------------------------------------------------------------------


def extract_first_object(text: str) -> dict:
    """Return the first well-formed JSON object embedded in the text.

    Tolerates surrounding prose and code fences; only the extraction is
    lenient, field validation stays strict.
    """
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(value, dict):
            return value
        start = text.find("{", start + 1)
    raise ResponseParseError("no JSON object found in response", payload=text)


@dataclass(frozen=True)
class FieldRule:
    kind: type | tuple[type, ...]
    required: bool = True
    check: Callable[[Any], bool] | None = None
    requires_when: str | None = None  # required only when this bool field is true/false

    def validate(self, name: str, value: Any, payload: str) -> Any:
        if isinstance(value, bool) and self.kind in (int, float):
            raise ResponseParseError(
                f"field {name!r} must be {self.kind.__name__}, got bool", payload=payload
            )
        if not isinstance(value, self.kind):
            kind_name = getattr(self.kind, "__name__", str(self.kind))
            raise ResponseParseError(
                f"field {name!r} must be {kind_name}, got {type(value).__name__}",
                payload=payload,
            )
        if self.check is not None and not self.check(value):
            raise ResponseParseError(f"field {name!r} out of range: {value!r}", payload=payload)
        return value


QUERY_REPLY_SCHEMA: dict[str, FieldRule] = {
    "valid": FieldRule(bool),
    "title": FieldRule(str, required=False, check=lambda t: bool(t.strip()), requires_when="valid"),
    "score": FieldRule(int, required=False, check=lambda s: 1 <= s <= 5, requires_when="valid"),
    "reason": FieldRule(str, required=False, check=lambda r: bool(r.strip()), requires_when="!valid"),
}


def parse_structured(response: str, schema: Mapping[str, FieldRule]) -> dict:
    """Extract and validate the first structured object in a model reply.

    Unknown fields are ignored; missing required fields and out-of-range
    values raise :class:`ResponseParseError` naming the field.
    """
    obj = extract_first_object(response)
    out: dict[str, Any] = {}
    for name, rule in schema.items():
        if name in obj:
            out[name] = rule.validate(name, obj[name], response)
    for name, rule in schema.items():
        required = rule.required
        if rule.requires_when is not None:
            flag = rule.requires_when.lstrip("!")
            wanted = not rule.requires_when.startswith("!")
            required = bool(out.get(flag)) == wanted
        if required and name not in out:
            raise ResponseParseError(f"missing required field {name!r}", payload=response)
    return out


# ---------------------------------------------------------------------------
# Packaged prompt templates (non-canonical; see data/templates)
# ---------------------------------------------------------------------------


def _load_template_text(name: str) -> str:
    return resources.files("klp.data").joinpath(name).read_text(encoding="utf-8")


def attribute_extraction_template() -> PromptTemplate:
    return PromptTemplate(
        system_text="You label retail products with structured attributes.",
        user_template=_load_template_text("attribute_extraction.txt"),
    )


def query_generation_template() -> PromptTemplate:
    return PromptTemplate(
        system_text="You write and judge search-friendly collection titles.",
        user_template=_load_template_text("query_generation.txt"),
    )
