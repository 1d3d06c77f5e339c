"""
Chat-completion gateway.

Every model call in the harness goes through `complete`. Two providers sit
behind it: `LiveProvider` talks to any endpoint speaking the chat-completions
wire format, `ScriptedProvider` replays canned replies so that whole
experiments run offline and byte-identically.
"""

import json
import logging
import os
import threading
from typing import Any, Dict, List, Literal, Optional, Sequence

import backoff
import openai
from openai import OpenAI
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from models import ChatMessage, ToolCall, ToolSpec

logger = logging.getLogger(__name__)

# Participants that may talk to a provider during a trial.
ROLES = ("assistant", "user", "constraints", "tool_suggester", "retriever", "verifier")
SUBAGENT_ROLES = ("constraints", "tool_suggester", "retriever", "verifier")

SCRIPT_FORMAT = "provider-scripts/v1"

# Transport-level failures worth another attempt; 4xx responses are final.
RETRYABLE_ERRORS = (
    openai.APIConnectionError,
    openai.RateLimitError,
    openai.InternalServerError,
)


class GatewayError(Exception):
    """Base class for provider errors."""


class ProviderFailure(GatewayError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class ScriptExhausted(GatewayError):
    """A scripted provider was asked for a reply it does not have."""


class SchemaViolation(GatewayError):
    """A reply does not fit the request (unknown tool, bad arguments)."""


class ScriptError(ValueError):
    """A provider script or script bundle is malformed."""


class CompletionRequest(BaseModel):
    model: str = ""
    messages: List[ChatMessage] = Field(min_length=1)
    tools: Optional[List[ToolSpec]] = None
    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=1024, gt=0)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _first_message(self):
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must have role system or user")
        return self

    def latest(self, role: Optional[str] = None) -> Optional[ChatMessage]:
        for message in reversed(self.messages):
            if role is None or message.role == role:
                return message
        return None


# Scripted provider

class ScriptEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    key: Optional[str] = None
    on: Literal["latest_user", "latest"] = "latest_user"
    reply: ChatMessage

    @field_validator("reply", mode="before")
    @classmethod
    def _text_reply(cls, value):
        if isinstance(value, str):
            return {"role": "assistant", "content": value}
        return value

    def matches(self, request: CompletionRequest) -> bool:
        if not self.key:
            return True
        message = request.latest("user" if self.on == "latest_user" else None)
        if message is None:
            return False
        return self.key.casefold() in message.content.casefold()


class ProviderScript(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["strict_sequence", "keyed"] = "strict_sequence"
    entries: List[ScriptEntry] = Field(default_factory=list)


class ScriptedProvider:
    """Replays a ProviderScript; safe to share, but a strict script belongs to one trial."""

    def __init__(self, script: ProviderScript, name: str = "scripted"):
        if script.mode == "keyed":
            seen = set()
            for entry in script.entries:
                key = (entry.key or "").casefold()
                if (key, entry.on) in seen:
                    raise ScriptError(f"{name}: duplicate key '{entry.key or ''}' in keyed script")
                seen.add((key, entry.on))
        self.script = script
        self.name = name
        self.requests: List[CompletionRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def complete(self, request: CompletionRequest) -> ChatMessage:
        with self._lock:
            self.requests.append(request)
            entry = self._next_entry(request)
            return entry.reply.model_copy(deep=True)

    def _next_entry(self, request: CompletionRequest) -> ScriptEntry:
        entries = self.script.entries
        if self.script.mode == "strict_sequence":
            if self._cursor >= len(entries):
                raise ScriptExhausted(f"{self.name}: script exhausted after {len(entries)} repl(ies)")
            entry = entries[self._cursor]
            if not entry.matches(request):
                raise ScriptExhausted(
                    f"{self.name}: entry {self._cursor} expects '{entry.key}' in the {entry.on} message"
                )
            self._cursor += 1
            return entry
        for entry in entries:
            if entry.matches(request):
                return entry
        latest = request.latest("user")
        preview = latest.content[:80] if latest else ""
        raise ScriptExhausted(f"{self.name}: no keyed entry matches {preview!r}")


def make_scripted_provider(script: Any, name: str = "scripted") -> ScriptedProvider:
    if not isinstance(script, ProviderScript):
        try:
            script = ProviderScript.model_validate(script)
        except ValidationError as e:
            raise ScriptError(f"{name}: {e}") from e
    return ScriptedProvider(script, name=name)


# Live provider

def _status_of(exc: Exception) -> Optional[int]:
    return getattr(exc, "status_code", None)


class LiveProvider:
    """Chat-completions client with bounded exponential backoff."""

    def __init__(self, base_url: str, api_key: str, model: str, timeout: float = 60.0,
                 max_attempts: int = 3, backoff_factor: float = 1.0):
        self.client = OpenAI(base_url=base_url, api_key=api_key, timeout=timeout, max_retries=0)
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_factor = backoff_factor

    def complete(self, request: CompletionRequest) -> ChatMessage:
        payload = self._payload(request)
        try:
            response = self._create_with_retry(payload)
        except RETRYABLE_ERRORS as e:
            raise ProviderFailure(
                f"gave up after {self.max_attempts} attempt(s): {e}", status=_status_of(e)
            ) from e
        except openai.APIStatusError as e:
            raise ProviderFailure(f"request rejected: {e}", status=e.status_code) from e
        except openai.OpenAIError as e:
            raise ProviderFailure(f"request failed: {e}") from e
        return self._to_message(response)

    def _create_with_retry(self, payload: Dict[str, Any]):
        @backoff.on_exception(
            backoff.expo,
            RETRYABLE_ERRORS,
            max_tries=self.max_attempts,
            factor=self.backoff_factor,
            logger=logger,
        )
        def _create():
            return self.client.chat.completions.create(**payload)

        return _create()

    def _payload(self, request: CompletionRequest) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "model": request.model or self.model,
            "messages": [m.to_wire() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.tools:
            payload["tools"] = [spec.to_openai_tool() for spec in request.tools]
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    @staticmethod
    def _to_message(response) -> ChatMessage:
        choice = response.choices[0].message
        calls = []
        for tool_call in choice.tool_calls or []:
            raw = tool_call.function.arguments or "{}"
            try:
                arguments = json.loads(raw)
            except json.JSONDecodeError as e:
                raise SchemaViolation(f"arguments for {tool_call.function.name} are not JSON: {e}") from e
            if not isinstance(arguments, dict):
                raise SchemaViolation(f"arguments for {tool_call.function.name} must be an object")
            calls.append(ToolCall(id=tool_call.id, name=tool_call.function.name, arguments=arguments))
        return ChatMessage(role="assistant", content=choice.content or "", tool_calls=calls or None)


# Uniform entry point

def validate_reply(request: CompletionRequest, message: ChatMessage) -> None:
    if message.role != "assistant":
        raise SchemaViolation(f"expected an assistant reply, got role '{message.role}'")
    if not message.tool_calls:
        return
    declared = {spec.name: spec for spec in request.tools or []}
    for call in message.tool_calls:
        spec = declared.get(call.name)
        if spec is None:
            raise SchemaViolation(f"reply calls undeclared tool '{call.name}'")
        # Required-ness is left to the strategies; some ask the user instead.
        problem = spec.check_arguments(call.arguments, allow_missing=True)
        if problem:
            raise SchemaViolation(problem)


def complete(provider, request: CompletionRequest) -> ChatMessage:
    message = provider.complete(request)
    validate_reply(request, message)
    if message.mixed:
        logger.debug("Assistant reply carries both text and tool calls")
    return message


# Script bundles

class ScriptBundle:
    """Per-task provider scripts, with optional per-trial overrides."""

    def __init__(self, tasks: Optional[Dict[str, Dict[str, ProviderScript]]] = None,
                 trials: Optional[Dict[str, Dict[int, Dict[str, ProviderScript]]]] = None):
        self.tasks = tasks or {}
        self.trials = trials or {}

    def scripts_for(self, task_id: str, trial_index: int) -> Dict[str, ProviderScript]:
        scripts = dict(self.tasks.get(task_id, {}))
        scripts.update(self.trials.get(task_id, {}).get(trial_index, {}))
        return scripts

    def merged(self, other: "ScriptBundle") -> "ScriptBundle":
        tasks = {k: dict(v) for k, v in self.tasks.items()}
        for task_id, roles in other.tasks.items():
            tasks.setdefault(task_id, {}).update(roles)
        trials = {k: {i: dict(r) for i, r in v.items()} for k, v in self.trials.items()}
        for task_id, by_trial in other.trials.items():
            for index, roles in by_trial.items():
                trials.setdefault(task_id, {}).setdefault(index, {}).update(roles)
        return ScriptBundle(tasks, trials)


def _parse_roles(path: str, where: str, raw: Any) -> Dict[str, ProviderScript]:
    if not isinstance(raw, dict):
        raise ScriptError(f"{path}: {where}: expected a map of roles")
    roles = {}
    for role, script in raw.items():
        if role not in ROLES:
            raise ScriptError(f"{path}: {where}.{role}: unknown role (expected one of {', '.join(ROLES)})")
        try:
            roles[role] = ProviderScript.model_validate(script)
        except ValidationError as e:
            details = "; ".join(
                f"{where}.{role}." + ".".join(str(p) for p in err["loc"]) + f": {err['msg']}" for err in e.errors()
            )
            raise ScriptError(f"{path}: {details}") from e
    return roles


def load_script_bundle(path: str) -> ScriptBundle:
    from environment import read_json_document

    raw = read_json_document(path, error_cls=ScriptError)
    if not isinstance(raw, dict) or raw.get("format") != SCRIPT_FORMAT:
        raise ScriptError(f"{path}: format must be '{SCRIPT_FORMAT}'")
    tasks: Dict[str, Dict[str, ProviderScript]] = {}
    trials: Dict[str, Dict[int, Dict[str, ProviderScript]]] = {}
    for task_id, body in (raw.get("tasks") or {}).items():
        if not isinstance(body, dict):
            raise ScriptError(f"{path}: tasks.{task_id}: expected a map")
        body = dict(body)
        overrides = body.pop("trials", {}) or {}
        tasks[task_id] = _parse_roles(path, f"tasks.{task_id}", body)
        for index, roles in overrides.items():
            try:
                trial_index = int(index)
            except ValueError:
                raise ScriptError(f"{path}: tasks.{task_id}.trials.{index}: trial index must be an integer")
            trials.setdefault(task_id, {})[trial_index] = _parse_roles(
                path, f"tasks.{task_id}.trials.{index}", roles
            )
    return ScriptBundle(tasks, trials)


class ScriptedProviderFactory:
    """Builds fresh scripted providers for every trial from a scripts directory.

    The directory holds `users.json` (simulated-user scripts shared by all
    strategies) and one `<strategy>.json` per strategy. Per-trial overrides
    are keyed by trial index; the trial seed is ignored, so a re-run attempt
    with a salted seed replays the same scripts.
    """

    def __init__(self, scripts_dir: str, strategy: str):
        strategy_path = os.path.join(scripts_dir, f"{strategy}.json")
        if not os.path.exists(strategy_path):
            raise ScriptError(f"no scripts for strategy '{strategy}' in {scripts_dir}")
        bundle = ScriptBundle()
        users_path = os.path.join(scripts_dir, "users.json")
        if os.path.exists(users_path):
            bundle = load_script_bundle(users_path)
        self.bundle = bundle.merged(load_script_bundle(strategy_path))
        self.scripts_dir = scripts_dir
        self.strategy = strategy

    def __call__(self, task_id: str, trial_index: int, trial_seed: int) -> Dict[str, ScriptedProvider]:
        scripts = self.bundle.scripts_for(task_id, trial_index)
        return {
            role: make_scripted_provider(scripts.get(role, ProviderScript()), name=f"{task_id}/{trial_index}/{role}")
            for role in ROLES
        }

    def validate(self, task_ids: Sequence[str], n_trials: int) -> None:
        """Construct every provider once so malformed scripts fail before a run."""
        for task_id in task_ids:
            for trial_index in range(n_trials):
                self(task_id, trial_index, 0)


class LiveProviderFactory:
    """Hands the same thread-safe live clients to every trial."""

    def __init__(self, base_url: str, api_key_env: str, model: str, user_model: Optional[str] = None,
                 timeout: float = 60.0, max_attempts: int = 3):
        api_key = os.environ.get(api_key_env)
        if not api_key:
            raise ValueError(f"environment variable {api_key_env} is not set")
        self.assistant = LiveProvider(base_url, api_key, model, timeout=timeout, max_attempts=max_attempts)
        if user_model and user_model != model:
            self.user = LiveProvider(base_url, api_key, user_model, timeout=timeout, max_attempts=max_attempts)
        else:
            self.user = self.assistant

    def __call__(self, task_id: str, trial_index: int, trial_seed: int) -> Dict[str, LiveProvider]:
        providers = {role: self.assistant for role in ROLES}
        providers["user"] = self.user
        return providers
