"""
Shared value types.

Everything that crosses a module boundary lives here: tool schemas, agent
actions, environment observations, chat messages and simulated-user turns.
File and wire shapes are pydantic models; purely in-process values are
frozen dataclasses.
"""

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, model_validator

ParamType = Literal["string", "integer", "number", "boolean", "array", "object"]


def _matches_type(value: Any, type_name: str) -> bool:
    if type_name == "string":
        return isinstance(value, str)
    if type_name == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if type_name == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_name == "boolean":
        return isinstance(value, bool)
    if type_name == "array":
        return isinstance(value, list)
    if type_name == "object":
        return isinstance(value, dict)
    return False


class ToolParam(BaseModel):
    name: str
    type: ParamType
    required: bool = True
    description: str = ""


class ToolSpec(BaseModel):
    """Declared schema of one callable tool."""

    name: str = Field(pattern=r"^[A-Za-z_][A-Za-z0-9_]*$")
    description: str = ""
    params: List[ToolParam] = Field(default_factory=list)
    mutating: bool = False
    # Identity bookkeeping used by follow-up-first strategies.
    authenticates: bool = False
    requires_identity: bool = False
    handoff: bool = False

    @model_validator(mode="after")
    def _unique_params(self):
        seen = set()
        for param in self.params:
            if param.name in seen:
                raise ValueError(f"duplicate parameter '{param.name}'")
            seen.add(param.name)
        return self

    def param(self, name: str) -> Optional[ToolParam]:
        for p in self.params:
            if p.name == name:
                return p
        return None

    @property
    def required_params(self) -> List[str]:
        return [p.name for p in self.params if p.required]

    def to_openai_tool(self) -> Dict[str, Any]:
        """JSON-schema function declaration in chat-completions format."""
        properties = {}
        for p in self.params:
            properties[p.name] = {"type": p.type}
            if p.description:
                properties[p.name]["description"] = p.description
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": self.required_params,
                },
            },
        }

    def check_arguments(self, arguments: Dict[str, Any], allow_missing: bool = False) -> Optional[str]:
        """Return an error naming the offending argument, or None if the call fits."""
        for name in arguments:
            if self.param(name) is None:
                return f"unexpected argument '{name}' for {self.name}"
        for param in self.params:
            if param.name not in arguments:
                if param.required and not allow_missing:
                    return f"missing required argument '{param.name}' for {self.name}"
                continue
            value = arguments[param.name]
            if value is None and not param.required:
                continue
            if not _matches_type(value, param.type):
                return f"argument '{param.name}' must be of type {param.type}"
        return None

    def signature(self) -> str:
        args = ", ".join(
            f"{p.name}: {p.type}" + ("" if p.required else " (optional)") for p in self.params
        )
        return f"{self.name}({args})"


class ToolCall(BaseModel):
    """An agent's invocation of a tool; doubles as the wire tool_call."""

    name: str
    arguments: Dict[str, Any] = Field(default_factory=dict)
    id: Optional[str] = None
    reasoning: Optional[str] = Field(default=None, exclude=True)

    def to_wire(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "type": "function",
            "function": {
                "name": self.name,
                "arguments": json.dumps(self.arguments, sort_keys=True),
            },
        }

    def describe(self) -> str:
        return f"{self.name}({json.dumps(self.arguments, sort_keys=True)})"


@dataclass(frozen=True)
class Respond:
    text: str


AgentAction = Union[ToolCall, Respond]


class TerminalCause(str, Enum):
    USER_STOP = "user_stop"
    TRANSFER = "transfer"
    MAX_TURNS = "max_turns"
    MAX_ACTIONS = "max_actions"
    STRATEGY_ERROR = "strategy_error"
    PROVIDER_FAILURE = "provider_failure"
    SCRIPT_EXHAUSTED = "script_exhausted"

    @property
    def aborted(self) -> bool:
        """Trial ended by infrastructure rather than by the conversation."""
        return self in (TerminalCause.PROVIDER_FAILURE, TerminalCause.SCRIPT_EXHAUSTED)


@dataclass(frozen=True)
class ToolResult:
    payload: Any = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.payload is not None and self.error is not None:
            raise ValueError("ToolResult carries either a payload or an error, not both")

    @property
    def ok(self) -> bool:
        return self.error is None

    def render(self) -> str:
        if self.error is not None:
            return f"Error: {self.error}"
        return json.dumps(self.payload, sort_keys=True)


@dataclass(frozen=True)
class UserUtterance:
    text: str


@dataclass(frozen=True)
class Terminated:
    cause: TerminalCause


Observation = Union[ToolResult, UserUtterance, Terminated]


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: str = ""
    tool_calls: Optional[List[ToolCall]] = None
    tool_call_id: Optional[str] = None

    @model_validator(mode="after")
    def _check_roles(self):
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages require tool_call_id")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("only assistant messages may carry tool_calls")
        return self

    @property
    def mixed(self) -> bool:
        """Assistant message carrying both tool calls and text."""
        return bool(self.tool_calls) and bool(self.content.strip())

    def to_wire(self) -> Dict[str, Any]:
        wire: Dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            wire["tool_calls"] = [call.to_wire() for call in self.tool_calls]
        if self.tool_call_id:
            wire["tool_call_id"] = self.tool_call_id
        return wire


# Simulated-user turns

@dataclass(frozen=True)
class Utterance:
    text: str


@dataclass(frozen=True)
class Stop:
    text: str = ""


@dataclass(frozen=True)
class TransferAccepted:
    pass


UserTurn = Union[Utterance, Stop, TransferAccepted]
