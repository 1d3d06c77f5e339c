"""
Input reformulation for the tool-calling assistant.

Before the assistant sees a user message, three modules enrich it:
  - memory: every user query so far, kept without any model call;
  - constraints: policy rules that apply to the query, or None when the
    query merely answers the assistant's follow-up question;
  - tool suggestions: a short list of relevant tools with one-line reasons.

The assistant receives the query followed by <memory>, <constraints> and
<tool_suggested> blocks, always all three and always in that order. A
disabled or empty module renders as None.
"""

import logging
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from llm_integration import CompletionRequest, complete
from models import AgentAction, ChatMessage, ToolSpec
from prompts import DEFAULT_VERSION, render_prompt
from strategies import StrategyContext, StrategySettings, ToolCallingStrategy, parse_line_items

logger = logging.getLogger(__name__)

TAGS = ("memory", "constraints", "tool_suggested")
_TAG_TOKEN = re.compile(r"<(/?)(memory|constraints|tool_suggested)>")
_GRAMMAR = re.compile(
    r"\A(?P<query>.*?)\n\n"
    r"<memory>(?:None|\n(?P<memory>.*?)\n)</memory>\n\n"
    r"<constraints>(?:None|\n(?P<constraints>.*?)\n)</constraints>\n\n"
    r"<tool_suggested>(?:None|\n(?P<tools>.*?)\n)</tool_suggested>\Z",
    re.DOTALL,
)


@dataclass(frozen=True)
class IrmaMemory:
    entries: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ConstraintChecklist:
    items: Tuple[str, ...] = ()
    none_flag: bool = False

    def __post_init__(self):
        if self.none_flag and self.items:
            raise ValueError("a None checklist cannot carry items")


@dataclass(frozen=True)
class ToolSuggestion:
    name: str
    reason: str


@dataclass(frozen=True)
class ToolSuggestionList:
    items: Tuple[ToolSuggestion, ...] = ()

    @property
    def names(self) -> List[str]:
        return [item.name for item in self.items]


@dataclass(frozen=True)
class ReformulatedInput:
    query: str
    memory_block: str
    constraints_block: str
    tools_block: str

    def render(self) -> str:
        return "\n\n".join([neutralize_tags(self.query), self.memory_block, self.constraints_block, self.tools_block])


def neutralize_tags(text: str) -> str:
    """Escape reserved tag tokens so user text cannot open or close a block."""
    return _TAG_TOKEN.sub(r"&lt;\1\2&gt;", text)


def _block(tag: str, lines: Optional[Sequence[str]]) -> str:
    if not lines:
        return f"<{tag}>None</{tag}>"
    body = "\n".join(neutralize_tags(line) for line in lines)
    return f"<{tag}>\n{body}\n</{tag}>"


def matches_reformulation_grammar(text: str) -> bool:
    """Exactly one region per tag, in order, after the query."""
    if _GRAMMAR.match(text) is None:
        return False
    return all(text.count(f"<{tag}>") == 1 and text.count(f"</{tag}>") == 1 for tag in TAGS)


def memory_lines(rendered: str) -> Optional[List[str]]:
    """Entries recovered from a rendered prompt's memory block (None when it reads None)."""
    match = _GRAMMAR.match(rendered)
    if match is None:
        raise ValueError("text does not follow the reformulation grammar")
    body = match.group("memory")
    if body is None:
        return None
    return [re.sub(r"^\d+\. ", "", line) for line in body.split("\n")]


# Modules

def irma_memorize(memory: IrmaMemory, user_query: str) -> IrmaMemory:
    if not user_query:
        raise ValueError("user_query must not be empty")
    return IrmaMemory(memory.entries + (user_query,))


def irma_constraints(policy_doc: str, user_query: str, history: Sequence[ChatMessage], provider,
                     temperature: float = 0.0, model: str = "", seed: Optional[int] = None,
                     prompt_version: str = DEFAULT_VERSION) -> ConstraintChecklist:
    """Policy checklist for `user_query`; sees the last assistant message for follow-up detection."""
    if not policy_doc.strip():
        return ConstraintChecklist()

    messages = [ChatMessage(role="system", content=render_prompt("irma_constraints", prompt_version, policy=policy_doc))]
    last_assistant = next(
        (m.content for m in reversed(history) if m.role == "assistant" and m.content.strip()), None
    )
    if last_assistant:
        messages.append(ChatMessage(role="assistant", content=last_assistant))
    messages.append(ChatMessage(role="user", content=user_query))

    reply = complete(provider, CompletionRequest(model=model, messages=messages, temperature=temperature, seed=seed))
    try:
        items = parse_line_items(reply.content)
    except ValueError as e:
        logger.warning("Unparseable constraints output, treating as None: %s", e)
        return ConstraintChecklist(none_flag=True)
    if items is None:
        return ConstraintChecklist(none_flag=True)
    return ConstraintChecklist(items=tuple(items))


def irma_suggest_tools(registry: Sequence[ToolSpec], user_query: str, provider, cap: int = 3,
                       temperature: float = 0.0, model: str = "", seed: Optional[int] = None,
                       prompt_version: str = DEFAULT_VERSION) -> ToolSuggestionList:
    if not registry:
        raise ValueError("tool registry must not be empty")
    if cap < 1:
        raise ValueError("cap must be >= 1")

    tools = "\n".join(f"- {spec.name}: {spec.description}" for spec in registry)
    messages = [
        ChatMessage(role="system", content=render_prompt("irma_tool_suggester", prompt_version, tools=tools, cap=cap)),
        ChatMessage(role="user", content=user_query),
    ]
    reply = complete(provider, CompletionRequest(model=model, messages=messages, temperature=temperature, seed=seed))
    try:
        items = parse_line_items(reply.content)
    except ValueError as e:
        logger.warning("Unparseable tool suggestions, ignoring: %s", e)
        return ToolSuggestionList()
    if items is None:
        return ToolSuggestionList()

    known = {spec.name for spec in registry}
    suggestions: List[ToolSuggestion] = []
    for item in items:
        name, _, reason = item.partition(":")
        name = name.strip().strip("`")
        if name not in known:
            logger.warning("Dropping suggested tool %r: not in the registry", name)
            continue
        if name in (s.name for s in suggestions):
            continue
        suggestions.append(ToolSuggestion(name=name, reason=reason.strip()))
    return ToolSuggestionList(items=tuple(suggestions[:cap]))


def irma_reformulate(user_query: str, memory: Optional[IrmaMemory],
                     constraints: Optional[ConstraintChecklist],
                     suggestions: Optional[ToolSuggestionList]) -> ReformulatedInput:
    """Assemble the tagged prompt; a None argument marks a disabled module."""
    memory_block = _block("memory", [f"{i}. {q}" for i, q in enumerate(memory.entries, 1)] if memory else None)
    constraints_block = _block("constraints", [f"- {c}" for c in constraints.items] if constraints else None)
    tools_block = _block(
        "tool_suggested",
        [f"- {s.name}: {s.reason}" if s.reason else f"- {s.name}" for s in suggestions.items] if suggestions else None,
    )
    return ReformulatedInput(query=user_query, memory_block=memory_block,
                             constraints_block=constraints_block, tools_block=tools_block)


class IrmaStrategy(ToolCallingStrategy):
    """Native tool calling over reformulated user input.

    `irma_prompt = fact` keeps the follow-up-first rules; `react` swaps in
    the plain ReAct instructions over the same inputs.
    """

    name = "irma"
    native_tools = True

    def __init__(self, settings: Optional[StrategySettings] = None):
        super().__init__(settings)
        self.follow_up_first = self.settings.irma_prompt == "fact"
        self.prompt_name = "irma_system" if self.follow_up_first else "react_system"

    def decide(self, context: StrategyContext, providers: Mapping[str, Any]) -> AgentAction:
        state = context.scratch.setdefault("irma", {"memory": IrmaMemory(), "rendered": {}})
        for index, message in enumerate(context.history):
            if message.role == "user" and index not in state["rendered"]:
                state["rendered"][index] = self._reformulate(context, providers, state, index)

        messages = [
            ChatMessage(role="user", content=state["rendered"][i]) if i in state["rendered"] else message
            for i, message in enumerate(context.history)
        ]
        return self.plan(context, providers, messages)

    def _reformulate(self, context: StrategyContext, providers: Mapping[str, Any],
                     state: Dict[str, Any], index: int) -> str:
        settings = self.settings
        query = context.history[index].content
        state["memory"] = irma_memorize(state["memory"], query)

        constraints = None
        if settings.irma_constraints:
            constraints = irma_constraints(
                context.policy_doc, query, context.history[:index], providers["constraints"],
                temperature=settings.subagent_temperature, model=settings.model, seed=context.seed,
                prompt_version=settings.prompt_version,
            )
        suggestions = None
        if settings.irma_tools:
            suggestions = irma_suggest_tools(
                context.tool_registry, query, providers["tool_suggester"], cap=settings.suggestion_cap,
                temperature=settings.subagent_temperature, model=settings.model, seed=context.seed,
                prompt_version=settings.prompt_version,
            )

        reformulated = irma_reformulate(
            query, state["memory"] if settings.irma_memory else None, constraints, suggestions
        )
        rendered = reformulated.render()
        context.note("reformulation", {
            "query": query,
            "ablation": settings.ablation_label,
            "memory": list(state["memory"].entries),
            "constraints": list(constraints.items) if constraints else None,
            "constraints_none": constraints.none_flag if constraints else None,
            "suggestions": suggestions.names if suggestions else None,
            "prompt": rendered,
        })
        return rendered
