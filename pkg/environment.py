"""
Episode engine for multi-turn tool-calling tasks.

Holds the domain database, executes tool calls against it, forwards agent
responses to the simulated user and scores the final state. Tool schemas
come from the task-suite file; tool behaviour is bound by name through
`register_tool`.
"""

import copy
import hashlib
import importlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, FrozenSet, List, Literal, Optional, Protocol, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from llm_integration import ProviderFailure, ScriptExhausted
from models import (
    AgentAction,
    Observation,
    Respond,
    Stop,
    TerminalCause,
    Terminated,
    ToolCall,
    ToolResult,
    ToolSpec,
    UserTurn,
    UserUtterance,
    Utterance,
)

logger = logging.getLogger(__name__)

SUITE_FORMAT = "task-suite/v1"
DIGEST_PATTERN = re.compile(r"^[0-9a-f]{64}$")

# Domain name -> module that registers its tool implementations on import.
DOMAIN_MODULES = {
    "mini-retail": "mini_retail",
}


class TaskSuiteError(ValueError):
    """Raised when a task-suite file cannot be loaded."""


class EnvUsageError(RuntimeError):
    """Raised when the engine is driven outside its contract."""


class ToolError(Exception):
    """Domain error raised by a tool implementation (record not found, bad state)."""


# Tool implementations

_TOOL_IMPLEMENTATIONS: Dict[str, Callable[..., Any]] = {}


def register_tool(name: str):
    """Bind a Python callable to the tool schema of the same name."""

    def decorator(func):
        existing = _TOOL_IMPLEMENTATIONS.get(name)
        if existing is not None and existing is not func:
            raise ValueError(f"tool '{name}' is already registered")
        _TOOL_IMPLEMENTATIONS[name] = func
        return func

    return decorator


def get_tool_implementation(name: str) -> Optional[Callable[..., Any]]:
    return _TOOL_IMPLEMENTATIONS.get(name)


# Database

def is_utf8_text(text: str) -> bool:
    try:
        text.encode("utf-8")
    except UnicodeEncodeError:
        return False
    return True


def validate_document(value: Any, path: str = "$", _seen: Optional[set] = None) -> None:
    """Reject anything that is not a finite scalar, text, bool, list or map."""
    if _seen is None:
        _seen = set()
    if isinstance(value, str):
        if not is_utf8_text(value):
            raise ValueError(f"{path}: text is not valid UTF-8 (lone surrogate)")
        return
    if value is None or isinstance(value, (bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"{path}: non-finite number")
        return
    if isinstance(value, (list, dict)):
        if id(value) in _seen:
            raise ValueError(f"{path}: cyclic document")
        _seen.add(id(value))
        if isinstance(value, list):
            for i, item in enumerate(value):
                validate_document(item, f"{path}[{i}]", _seen)
        else:
            for key, item in value.items():
                if not isinstance(key, str):
                    raise ValueError(f"{path}: map keys must be text")
                if not is_utf8_text(key):
                    raise ValueError(f"{path}: key is not valid UTF-8 (lone surrogate)")
                validate_document(item, f"{path}.{key}", _seen)
        _seen.discard(id(value))
        return
    raise ValueError(f"{path}: unsupported value of type {type(value).__name__}")


@dataclass
class DomainDb:
    collections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    mutable_collections: FrozenSet[str] = frozenset()

    def __post_init__(self):
        self.mutable_collections = frozenset(self.mutable_collections)
        for name, records in self.collections.items():
            if not isinstance(records, dict):
                raise ValueError(f"collection '{name}' must map record ids to documents")
            validate_document(records, name)

    def copy(self) -> "DomainDb":
        return DomainDb(copy.deepcopy(self.collections), self.mutable_collections)

    def get(self, collection: str, record_id: str) -> Optional[Any]:
        return self.collections.get(collection, {}).get(record_id)


def canonical_json(value: Any) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def db_hash(db: DomainDb, mutable_only: bool = True) -> str:
    if mutable_only:
        selected = {name: db.collections.get(name, {}) for name in db.mutable_collections}
    else:
        selected = db.collections
    # surrogatepass keeps the digest total; valid text encodes exactly as plain UTF-8.
    return hashlib.sha256(canonical_json(selected).encode("utf-8", "surrogatepass")).hexdigest()


# Tasks and suites

@dataclass
class Task:
    id: str
    instruction: str
    initial_db: DomainDb
    gold_db_digest: str
    required_outputs: List[str] = field(default_factory=list)
    annotations: FrozenSet[str] = frozenset()
    gold_actions: List[ToolCall] = field(default_factory=list)


@dataclass
class TaskSuite:
    domain: str
    policy: str
    tools: List[ToolSpec]
    tasks: List[Task]
    mutable_collections: FrozenSet[str] = frozenset()

    def task(self, task_id: str) -> Task:
        for task in self.tasks:
            if task.id == task_id:
                return task
        raise KeyError(task_id)


class _TaskDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    instruction: str
    initial_db: Optional[Dict[str, Dict[str, Any]]] = None
    gold_db_digest: Optional[str] = None
    gold_actions: Optional[List[ToolCall]] = None
    required_outputs: List[str] = Field(default_factory=list)
    annotations: List[Literal["gt_error", "ui_error"]] = Field(default_factory=list)

    @field_validator("gold_db_digest")
    @classmethod
    def _hex_digest(cls, value):
        if value is not None and not DIGEST_PATTERN.match(value):
            raise ValueError("must be 64 lowercase hex characters")
        return value

    @model_validator(mode="after")
    def _has_gold(self):
        if self.gold_db_digest is None and self.gold_actions is None:
            raise ValueError("either gold_db_digest or gold_actions is required")
        return self


class _SuiteDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: str = SUITE_FORMAT
    domain: str
    policy: str = ""
    mutable_collections: List[str] = Field(default_factory=list)
    initial_db: Optional[Dict[str, Dict[str, Any]]] = None
    tools: List[ToolSpec] = Field(default_factory=list)
    tasks: List[Dict[str, Any]] = Field(default_factory=list)


def format_validation_error(exc: ValidationError, prefix: str = "") -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{prefix}{loc}: {err['msg']}" if loc else f"{prefix}{err['msg']}")
    return "; ".join(parts)


def read_json_document(path: str, error_cls=TaskSuiteError) -> Any:
    if not os.path.exists(path):
        raise error_cls(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise error_cls(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def load_domain(domain: str) -> None:
    module_name = DOMAIN_MODULES.get(domain)
    if module_name is None:
        raise TaskSuiteError(f"unknown domain '{domain}'")
    importlib.import_module(module_name)


def find_tool(registry: Sequence[ToolSpec], name: str) -> Optional[ToolSpec]:
    for spec in registry:
        if spec.name == name:
            return spec
    return None


def replay_gold_actions(initial_db: DomainDb, registry: Sequence[ToolSpec],
                        actions: Sequence[ToolCall]) -> DomainDb:
    """Apply gold tool calls in order; every one of them must succeed."""
    db = initial_db
    for call in actions:
        db, result = execute_tool(db, registry, call)
        if not result.ok:
            raise TaskSuiteError(f"gold action {call.describe()} failed: {result.error}")
    return db


def load_suite(path: str) -> TaskSuite:
    """Load and validate a task-suite document."""
    raw = read_json_document(path)
    try:
        doc = _SuiteDocument.model_validate(raw)
    except ValidationError as e:
        raise TaskSuiteError(f"{path}: {format_validation_error(e)}") from e

    if doc.format != SUITE_FORMAT:
        raise TaskSuiteError(f"{path}: unsupported format '{doc.format}'")
    load_domain(doc.domain)

    names = set()
    for spec in doc.tools:
        if spec.name in names:
            raise TaskSuiteError(f"{path}: duplicate tool '{spec.name}'")
        if get_tool_implementation(spec.name) is None:
            raise TaskSuiteError(f"{path}: no implementation registered for tool '{spec.name}'")
        names.add(spec.name)

    mutable = frozenset(doc.mutable_collections)
    tasks: List[Task] = []
    seen_ids = set()
    for index, raw_task in enumerate(doc.tasks):
        label = raw_task.get("id", f"#{index}") if isinstance(raw_task, dict) else f"#{index}"
        try:
            task_doc = _TaskDocument.model_validate(raw_task)
        except ValidationError as e:
            raise TaskSuiteError(f"{path}: task '{label}': {format_validation_error(e)}") from e
        if task_doc.id in seen_ids:
            raise TaskSuiteError(f"{path}: duplicate task id '{task_doc.id}'")
        seen_ids.add(task_doc.id)
        tasks.append(_build_task(path, task_doc, doc, mutable))

    logger.info("Loaded %d task(s) for domain %s from %s", len(tasks), doc.domain, path)
    return TaskSuite(domain=doc.domain, policy=doc.policy, tools=list(doc.tools),
                     tasks=tasks, mutable_collections=mutable)


def _build_task(path: str, task_doc: _TaskDocument, suite: _SuiteDocument,
                mutable: FrozenSet[str]) -> Task:
    source_db = task_doc.initial_db if task_doc.initial_db is not None else suite.initial_db
    if source_db is None:
        raise TaskSuiteError(f"{path}: task '{task_doc.id}': initial_db missing and no suite default")
    try:
        initial_db = DomainDb(copy.deepcopy(source_db), mutable)
    except ValueError as e:
        raise TaskSuiteError(f"{path}: task '{task_doc.id}': initial_db: {e}") from e

    digest = task_doc.gold_db_digest
    gold_actions = list(task_doc.gold_actions or [])
    if task_doc.gold_actions is not None:
        try:
            gold_db = replay_gold_actions(initial_db, suite.tools, gold_actions)
        except TaskSuiteError as e:
            raise TaskSuiteError(f"{path}: task '{task_doc.id}': {e}") from e
        replayed = db_hash(gold_db)
        if digest is not None and digest != replayed:
            raise TaskSuiteError(
                f"{path}: task '{task_doc.id}': gold_db_digest does not match gold_actions "
                f"(replayed {replayed})"
            )
        digest = replayed

    return Task(
        id=task_doc.id,
        instruction=task_doc.instruction,
        initial_db=initial_db,
        gold_db_digest=digest,
        required_outputs=list(task_doc.required_outputs),
        annotations=frozenset(task_doc.annotations),
        gold_actions=gold_actions,
    )


def load_task_suite(path: str) -> List[Task]:
    return load_suite(path).tasks


# Tool execution

def validate_arguments(spec: ToolSpec, arguments: Dict[str, Any], allow_missing: bool = False) -> Optional[str]:
    return spec.check_arguments(arguments, allow_missing)


def execute_tool(db: DomainDb, registry: Sequence[ToolSpec], call: ToolCall) -> Tuple[DomainDb, ToolResult]:
    spec = find_tool(registry, call.name)
    implementation = get_tool_implementation(call.name) if spec is not None else None
    if spec is None or implementation is None:
        return db, ToolResult(error=f"unknown tool: {call.name}")

    problem = validate_arguments(spec, call.arguments)
    if problem:
        return db, ToolResult(error=problem)

    # Implementations work on a private copy; read-only tools never publish it.
    working = copy.deepcopy(db.collections)
    try:
        payload = implementation(working, **call.arguments)
    except ToolError as e:
        return db, ToolResult(error=str(e))
    payload = copy.deepcopy(payload)

    if not spec.mutating:
        return db, ToolResult(payload=payload)
    try:
        updated = DomainDb(working, db.mutable_collections)
    except ValueError as e:
        return db, ToolResult(error=f"invalid database update: {e}")
    return updated, ToolResult(payload=payload)


# Episode state

class UserHandle(Protocol):
    def reply(self, agent_text: str) -> UserTurn: ...

    def accept_transfer(self) -> UserTurn: ...


@dataclass(frozen=True)
class EnvState:
    db: DomainDb
    tools: Tuple[ToolSpec, ...] = ()
    transcript: Tuple[Tuple[str, str], ...] = ()
    turn_count: int = 0
    done: bool = False
    terminal_cause: Optional[TerminalCause] = None


def reset(task: Task, tools: Sequence[ToolSpec]) -> EnvState:
    return EnvState(db=task.initial_db.copy(), tools=tuple(tools))


def finish(state: EnvState, cause: TerminalCause) -> EnvState:
    """End the episode for a reason decided outside the engine (strategy error, step limits)."""
    if state.done:
        return state
    return replace(state, done=True, terminal_cause=cause)


def step(state: EnvState, action: AgentAction, user: UserHandle,
         max_turns: Optional[int] = None) -> Tuple[EnvState, Observation]:
    if state.done:
        raise EnvUsageError("step called on a finished episode")

    if isinstance(action, ToolCall):
        db, result = execute_tool(state.db, state.tools, action)
        new_state = replace(state, db=db)
        spec = find_tool(state.tools, action.name)
        if spec is not None and spec.handoff and result.ok:
            user.accept_transfer()
            new_state = replace(new_state, done=True, terminal_cause=TerminalCause.TRANSFER)
        return new_state, result

    if not isinstance(action, Respond):
        raise EnvUsageError(f"unsupported action {action!r}")

    transcript = state.transcript + (("assistant", action.text),)
    if max_turns is not None and state.turn_count >= max_turns:
        cause = TerminalCause.MAX_TURNS
        return replace(state, transcript=transcript, done=True, terminal_cause=cause), Terminated(cause)

    try:
        turn = user.reply(action.text)
    except ScriptExhausted as e:
        logger.warning("User script exhausted: %s", e)
        cause = TerminalCause.SCRIPT_EXHAUSTED
        return replace(state, transcript=transcript, done=True, terminal_cause=cause), Terminated(cause)
    except ProviderFailure as e:
        logger.warning("User simulator failed: %s", e)
        cause = TerminalCause.PROVIDER_FAILURE
        return replace(state, transcript=transcript, done=True, terminal_cause=cause), Terminated(cause)

    if isinstance(turn, Stop):
        cause = TerminalCause.USER_STOP
        new_state = replace(
            state,
            transcript=transcript + (("user", turn.text),),
            turn_count=state.turn_count + 1,
            done=True,
            terminal_cause=cause,
        )
        return new_state, Terminated(cause)
    if isinstance(turn, Utterance):
        new_state = replace(
            state,
            transcript=transcript + (("user", turn.text),),
            turn_count=state.turn_count + 1,
        )
        return new_state, UserUtterance(turn.text)
    raise EnvUsageError(f"unexpected user turn {turn!r}")


# Reward

def agent_messages(transcript: Sequence[Tuple[str, str]]) -> List[str]:
    return [text for speaker, text in transcript if speaker == "assistant"]


def compute_reward(final_db: DomainDb, transcript: Sequence[Tuple[str, str]], task: Task) -> int:
    """1 iff the mutable collections match gold and every required fragment was said."""
    if db_hash(final_db, mutable_only=True) != task.gold_db_digest:
        return 0
    said = "\n".join(agent_messages(transcript)).casefold()
    for fragment in task.required_outputs:
        if fragment.casefold() not in said:
            return 0
    return 1
