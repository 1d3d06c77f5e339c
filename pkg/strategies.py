"""
Agent strategies.

A strategy turns the conversation so far into exactly one next action: a
tool call or a message to the user. ReAct, Function-Calling and FACT live
here; IRMA and Self-Reflection build on the same tool-calling backbone in
their own modules.

Two backbones decode model output:
  - text: the model writes "Thought: ... Action: ```json {...}```";
  - native: the model returns chat-completions tool_calls.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from environment import find_tool
from llm_integration import CompletionRequest, SchemaViolation, complete
from models import AgentAction, ChatMessage, Respond, ToolCall, ToolSpec
from prompts import DEFAULT_VERSION, render_prompt

logger = logging.getLogger(__name__)

STRATEGY_NAMES = ("react", "function_calling", "fact", "self_reflection", "irma")
RESPOND_ACTION = "respond"

_ACTION_BLOCK = re.compile(r"Action:\s*```(?:json)?\s*(\{.*\})\s*```", re.DOTALL)
_THOUGHT_PREFIX = re.compile(r"^\s*Thought:\s*", re.IGNORECASE)


class StrategyError(RuntimeError):
    """A strategy could not produce a valid action."""


class DecodeError(ValueError):
    """Model output could not be turned into a valid action."""


@dataclass
class StrategySettings:
    model: str = ""
    assistant_temperature: float = 0.0
    subagent_temperature: float = 0.0
    max_output_tokens: int = 1024
    prompt_version: str = DEFAULT_VERSION
    fact_backbone: str = "react"
    irma_memory: bool = True
    irma_constraints: bool = True
    irma_tools: bool = True
    irma_prompt: str = "fact"
    suggestion_cap: int = 3

    def __post_init__(self):
        if self.fact_backbone not in ("react", "function_calling"):
            raise ValueError(f"fact_backbone must be react or function_calling, got {self.fact_backbone!r}")
        if self.irma_prompt not in ("fact", "react"):
            raise ValueError(f"irma_prompt must be fact or react, got {self.irma_prompt!r}")
        if self.suggestion_cap < 1:
            raise ValueError("suggestion_cap must be >= 1")

    @property
    def ablation_label(self) -> str:
        """M/C/T label of the enabled IRMA modules."""
        enabled = [flag for flag, on in (("M", self.irma_memory), ("C", self.irma_constraints),
                                         ("T", self.irma_tools)) if on]
        return "+".join(enabled) or "none"


@dataclass
class StrategyContext:
    policy_doc: str
    tool_registry: List[ToolSpec]
    history: List[ChatMessage]
    scratch: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    # (kind, payload) pairs the runner records as trajectory events.
    notes: List[Tuple[str, Dict[str, Any]]] = field(default_factory=list)

    def note(self, kind: str, payload: Dict[str, Any]) -> None:
        self.notes.append((kind, payload))

    def drain_notes(self) -> List[Tuple[str, Dict[str, Any]]]:
        notes, self.notes = self.notes, []
        return notes

    def user_queries(self) -> List[str]:
        return [m.content for m in self.history if m.role == "user"]


# Text action grammar

def parse_text_action(text: str) -> Tuple[str, str, Dict[str, Any]]:
    """Split 'Thought: ... Action: ```json {...}```' into (reasoning, name, arguments)."""
    match = _ACTION_BLOCK.search(text or "")
    if not match:
        raise DecodeError("no fenced Action block found")
    try:
        data = json.loads(match.group(1))
    except json.JSONDecodeError as e:
        raise DecodeError(f"action is not valid JSON: {e.msg}") from e
    if not isinstance(data, dict) or not isinstance(data.get("name"), str):
        raise DecodeError("action must be an object with a string 'name'")
    arguments = data.get("arguments", {})
    if not isinstance(arguments, dict):
        raise DecodeError("action 'arguments' must be an object")
    reasoning = _THOUGHT_PREFIX.sub("", text[:match.start()]).strip()
    return reasoning, data["name"], arguments


def render_text_action(reasoning: str, name: str, arguments: Dict[str, Any]) -> str:
    block = json.dumps({"name": name, "arguments": arguments}, sort_keys=True)
    action = f"Action:\n```json\n{block}\n```"
    return f"Thought: {reasoning}\n{action}" if reasoning else action


def to_text_transcript(messages: Sequence[ChatMessage]) -> List[ChatMessage]:
    """Rewrite native tool traffic as plain text turns for text-only prompting."""
    converted = []
    for message in messages:
        if message.role == "assistant" and message.tool_calls:
            call = message.tool_calls[0]
            converted.append(ChatMessage(role="assistant",
                                         content=render_text_action(message.content, call.name, call.arguments)))
        elif message.role == "assistant":
            converted.append(ChatMessage(role="assistant",
                                         content=render_text_action("", RESPOND_ACTION, {"content": message.content})))
        elif message.role == "tool":
            converted.append(ChatMessage(role="user", content=f"Observation: {message.content}"))
        else:
            converted.append(ChatMessage(role=message.role, content=message.content))
    return converted


def parse_line_items(text: str) -> Optional[List[str]]:
    """Parse sub-agent output: '- item' lines, or the literal None.

    Returns None for the literal, raises ValueError when neither form is present.
    """
    stripped = (text or "").strip()
    if stripped.rstrip(".").casefold() == "none":
        return None
    items = [line.strip()[2:].strip() for line in stripped.splitlines() if line.strip().startswith("- ")]
    items = [item for item in items if item]
    if not items:
        raise ValueError(f"expected '- ' line items or None, got {stripped[:60]!r}")
    return items


# Follow-up-first rules

def _join_fields(names: Sequence[str]) -> str:
    words = [n.replace("_", " ") for n in names]
    if len(words) == 1:
        return words[0]
    return ", ".join(words[:-1]) + " and " + words[-1]


def identity_established(context: StrategyContext) -> bool:
    """True once an authenticating tool has returned without error."""
    authenticating = {spec.name for spec in context.tool_registry if spec.authenticates}
    pending = set()
    for message in context.history:
        if message.role == "assistant" and message.tool_calls:
            pending.update(c.id for c in message.tool_calls if c.name in authenticating and c.id)
        elif message.role == "tool" and message.tool_call_id in pending:
            if not message.content.startswith("Error:"):
                return True
    return False


def is_grounded(value: str, context: StrategyContext) -> bool:
    """A value is grounded if the user said it or a tool returned it."""
    pattern = re.compile(r"(?<!\w)" + re.escape(value) + r"(?!\w)", re.IGNORECASE)
    for message in context.history:
        if message.role in ("user", "tool") and pattern.search(message.content):
            return True
    return False


def follow_up_question(call: ToolCall, context: StrategyContext,
                       prompt_version: str = DEFAULT_VERSION) -> Optional[str]:
    """Question to ask before `call` may run, or None when it can run now."""
    spec = find_tool(context.tool_registry, call.name)
    if spec is None or spec.handoff:
        return None

    missing = [p for p in spec.required_params if call.arguments.get(p) in (None, "")]
    if missing:
        return render_prompt("fact_missing_question", prompt_version, fields=_join_fields(missing))

    if spec.requires_identity and not identity_established(context):
        auth = next((s for s in context.tool_registry if s.authenticates), None)
        if auth is not None:
            fields = _join_fields(auth.required_params or [auth.name])
            return render_prompt("fact_identity_question", prompt_version, fields=fields)

    # Identifier-like values only; free text is never "grounded" verbatim.
    ungrounded = [
        name for name, value in call.arguments.items()
        if isinstance(value, str) and value and not re.search(r"\s", value) and not is_grounded(value, context)
    ]
    if ungrounded:
        return render_prompt("fact_missing_question", prompt_version, fields=_join_fields(ungrounded))
    return None


# Strategies

class Strategy:
    name = ""

    def __init__(self, settings: Optional[StrategySettings] = None):
        self.settings = settings or StrategySettings()

    def system_prompt(self, policy_doc: str, registry: Sequence[ToolSpec]) -> str:
        raise NotImplementedError

    def new_context(self, policy_doc: str, registry: Sequence[ToolSpec], seed: Optional[int] = None) -> StrategyContext:
        system = ChatMessage(role="system", content=self.system_prompt(policy_doc, registry))
        return StrategyContext(policy_doc=policy_doc, tool_registry=list(registry), history=[system], seed=seed)

    def decide(self, context: StrategyContext, providers: Mapping[str, Any]) -> AgentAction:
        raise NotImplementedError


class ToolCallingStrategy(Strategy):
    """Single assistant model choosing between a tool call and a reply."""

    name = "function_calling"
    prompt_name = "function_calling_system"
    native_tools = True
    follow_up_first = False

    def action_instructions(self, registry: Sequence[ToolSpec]) -> str:
        version = self.settings.prompt_version
        if self.native_tools:
            return render_prompt("native_actions", version)
        tools = "\n".join(f"- {spec.signature()}: {spec.description}" for spec in registry)
        return render_prompt("text_actions", version, tools=tools)

    def system_prompt(self, policy_doc: str, registry: Sequence[ToolSpec]) -> str:
        return render_prompt(self.prompt_name, self.settings.prompt_version, policy=policy_doc or "None",
                             action_instructions=self.action_instructions(registry))

    def decide(self, context: StrategyContext, providers: Mapping[str, Any]) -> AgentAction:
        return self.plan(context, providers, context.history)

    def plan(self, context: StrategyContext, providers: Mapping[str, Any],
             messages: Sequence[ChatMessage]) -> AgentAction:
        """Query the assistant, allowing one repair round for unusable output."""
        messages = list(messages)
        attempt_messages = messages
        for attempt in range(2):
            reply = None
            try:
                reply = complete(providers["assistant"], self.build_request(context, attempt_messages))
                action = self.decode(reply, context)
            except (SchemaViolation, DecodeError) as e:
                if attempt == 1:
                    raise StrategyError(f"schema_violation after one retry: {e}") from e
                logger.warning("%s produced an unusable action (%s); retrying once", self.name, e)
                attempt_messages = messages + self.repair_messages(reply, str(e))
                continue
            return self.apply_follow_up_rules(action, context)
        raise StrategyError("unreachable")

    def build_request(self, context: StrategyContext, messages: Sequence[ChatMessage]) -> CompletionRequest:
        return CompletionRequest(
            model=self.settings.model,
            messages=list(messages) if self.native_tools else to_text_transcript(messages),
            tools=list(context.tool_registry) if self.native_tools else None,
            temperature=self.settings.assistant_temperature,
            max_output_tokens=self.settings.max_output_tokens,
            seed=context.seed,
        )

    def repair_messages(self, reply: Optional[ChatMessage], error: str) -> List[ChatMessage]:
        feedback = render_prompt("repair", self.settings.prompt_version, error=error)
        if self.native_tools or reply is None:
            return [ChatMessage(role="system", content=feedback)]
        return [ChatMessage(role="assistant", content=reply.content), ChatMessage(role="user", content=feedback)]

    def decode(self, reply: ChatMessage, context: StrategyContext) -> AgentAction:
        if self.native_tools:
            return self._decode_native(reply, context)
        return self._decode_text(reply, context)

    def _decode_native(self, reply: ChatMessage, context: StrategyContext) -> AgentAction:
        if reply.tool_calls:
            if len(reply.tool_calls) > 1:
                logger.warning("Reply carries %d tool calls; using the first", len(reply.tool_calls))
            call = reply.tool_calls[0]
            action = ToolCall(name=call.name, arguments=dict(call.arguments), id=call.id,
                              reasoning=reply.content.strip() or None)
            self.check_call(action, context)
            return action
        text = reply.content.strip()
        if not text:
            raise DecodeError("empty reply")
        return Respond(text)

    def _decode_text(self, reply: ChatMessage, context: StrategyContext) -> AgentAction:
        reasoning, name, arguments = parse_text_action(reply.content)
        if name == RESPOND_ACTION:
            content = arguments.get("content")
            if not isinstance(content, str) or not content.strip():
                raise DecodeError("respond needs a non-empty 'content' argument")
            return Respond(content.strip())
        action = ToolCall(name=name, arguments=arguments, reasoning=reasoning or None)
        self.check_call(action, context)
        return action

    def check_call(self, call: ToolCall, context: StrategyContext) -> None:
        spec = find_tool(context.tool_registry, call.name)
        if spec is None:
            raise DecodeError(f"unknown tool '{call.name}'")
        problem = spec.check_arguments(call.arguments, allow_missing=self.follow_up_first)
        if problem:
            raise DecodeError(problem)

    def apply_follow_up_rules(self, action: AgentAction, context: StrategyContext) -> AgentAction:
        if not self.follow_up_first or not isinstance(action, ToolCall):
            return action
        question = follow_up_question(action, context, self.settings.prompt_version)
        if question is None:
            return action
        logger.debug("Asking a follow-up question instead of calling %s", action.name)
        return Respond(question)


class FunctionCallingStrategy(ToolCallingStrategy):
    name = "function_calling"


class ReActStrategy(ToolCallingStrategy):
    name = "react"
    prompt_name = "react_system"
    native_tools = False


class FactStrategy(ToolCallingStrategy):
    """Follow-up-first: ask before any tool call whose inputs are not yet known."""

    name = "fact"
    prompt_name = "fact_system"
    follow_up_first = True

    def __init__(self, settings: Optional[StrategySettings] = None):
        super().__init__(settings)
        self.native_tools = self.settings.fact_backbone == "function_calling"


def decide(strategy: Strategy, context: StrategyContext, providers: Mapping[str, Any]) -> AgentAction:
    """Next action of `strategy`; `providers` maps participant role to provider."""
    action = strategy.decide(context, providers)
    if not isinstance(action, (ToolCall, Respond)):
        raise StrategyError(f"{strategy.name} returned {action!r} instead of an action")
    return action


def fact_decide(context: StrategyContext, providers: Mapping[str, Any],
                settings: Optional[StrategySettings] = None) -> AgentAction:
    return decide(FactStrategy(settings), context, providers)


def build_strategy(name: str, settings: Optional[StrategySettings] = None) -> Strategy:
    from irma import IrmaStrategy
    from self_reflection import SelfReflectionStrategy

    strategies = {
        "react": ReActStrategy,
        "function_calling": FunctionCallingStrategy,
        "fact": FactStrategy,
        "self_reflection": SelfReflectionStrategy,
        "irma": IrmaStrategy,
    }
    if name not in strategies:
        raise ValueError(f"unknown strategy '{name}' (expected one of {', '.join(STRATEGY_NAMES)})")
    return strategies[name](settings)
