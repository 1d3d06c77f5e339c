"""
Self-reflection over planned tool calls.

Every tool call the function-calling backbone plans is checked by a
verifier against the policy rules a retriever pulled for the conversation.
A rejected call triggers exactly one revision, which is emitted without a
second check.
"""

import logging
import re
from dataclasses import dataclass
from typing import Any, List, Mapping, Optional, Sequence, Tuple

from environment import find_tool
from llm_integration import CompletionRequest, complete
from models import AgentAction, ChatMessage, ToolCall, ToolSpec
from prompts import DEFAULT_VERSION, render_prompt
from strategies import FunctionCallingStrategy, StrategyContext, StrategySettings, parse_line_items

logger = logging.getLogger(__name__)

_VERDICT = re.compile(r"VERDICT:\s*(APPROVED|REJECTED)\b", re.IGNORECASE)
_JUSTIFICATION = re.compile(r"JUSTIFICATION:\s*(.*?)\s*(?:^\s*VIOLATED:|\Z)", re.IGNORECASE | re.DOTALL | re.MULTILINE)
_VIOLATED = re.compile(r"^\s*VIOLATED:\s*(.*)\Z", re.IGNORECASE | re.DOTALL | re.MULTILINE)


@dataclass(frozen=True)
class Verdict:
    approved: bool
    justification: str = ""
    violated_rules: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.approved and not (self.justification or self.violated_rules):
            raise ValueError("a rejection needs a justification or violated rules")


def parse_verdict(text: str) -> Optional[Verdict]:
    """Parse the VERDICT / JUSTIFICATION / VIOLATED reply; None if there is no verdict line."""
    match = _VERDICT.search(text or "")
    if match is None:
        return None
    approved = match.group(1).upper() == "APPROVED"

    justification = ""
    found = _JUSTIFICATION.search(text)
    if found:
        justification = found.group(1).strip()

    violated: List[str] = []
    found = _VIOLATED.search(text)
    if found:
        try:
            violated = parse_line_items(found.group(1)) or []
        except ValueError:
            violated = []

    if approved:
        return Verdict(approved=True, justification=justification)
    if not justification and not violated:
        justification = "rejected without justification"
    return Verdict(approved=False, justification=justification, violated_rules=tuple(violated))


def sr_retrieve_rules(user_queries: Sequence[str], policy_doc: str, provider,
                      temperature: float = 0.0, model: str = "", seed: Optional[int] = None,
                      prompt_version: str = DEFAULT_VERSION) -> List[str]:
    if not user_queries:
        raise ValueError("at least one user query is required")
    if not policy_doc.strip():
        return []

    requests = "\n".join(f"{i}. {q}" for i, q in enumerate(user_queries, 1))
    messages = [
        ChatMessage(role="system", content=render_prompt("sr_retriever", prompt_version, policy=policy_doc)),
        ChatMessage(role="user", content=f"Customer requests so far:\n{requests}"),
    ]
    reply = complete(provider, CompletionRequest(model=model, messages=messages, temperature=temperature, seed=seed))
    try:
        return parse_line_items(reply.content) or []
    except ValueError as e:
        logger.warning("Unparseable rule list, verifying against no rules: %s", e)
        return []


def sr_verify(planned: ToolCall, rules: Sequence[str], provider,
              registry: Optional[Sequence[ToolSpec]] = None, temperature: float = 0.0, model: str = "",
              seed: Optional[int] = None, prompt_version: str = DEFAULT_VERSION) -> Verdict:
    if registry is not None and find_tool(registry, planned.name) is None:
        raise ValueError(f"planned call names an unknown tool '{planned.name}'")

    rules_text = "\n".join(f"- {rule}" for rule in rules) or "None"
    messages = [
        ChatMessage(role="system", content=render_prompt("sr_verifier", prompt_version, rules=rules_text)),
        ChatMessage(role="user", content=f"Planned tool call: {planned.describe()}"),
    ]
    reply = complete(provider, CompletionRequest(model=model, messages=messages, temperature=temperature, seed=seed))
    verdict = parse_verdict(reply.content)
    if verdict is None:
        logger.warning("Verifier reply has no verdict line; approving %s", planned.name)
        return Verdict(approved=True, justification="unparseable verifier output")
    return verdict


def _describe(action: AgentAction) -> str:
    if isinstance(action, ToolCall):
        return action.describe()
    return f"respond: {action.text}"


class SelfReflectionStrategy(FunctionCallingStrategy):
    name = "self_reflection"

    def __init__(self, settings: Optional[StrategySettings] = None):
        super().__init__(settings)
        # Verifier calls made in each decide() that returned a tool call.
        self.verify_log: List[int] = []

    def decide(self, context: StrategyContext, providers: Mapping[str, Any]) -> AgentAction:
        action = self.plan(context, providers, context.history)
        if not isinstance(action, ToolCall):
            return action

        settings = self.settings
        rules = self._rules(context, providers)
        verdict = sr_verify(
            action, rules, providers["verifier"], context.tool_registry,
            temperature=settings.subagent_temperature, model=settings.model, seed=context.seed,
            prompt_version=settings.prompt_version,
        )
        payload = {
            "call": action.describe(),
            "rules": list(rules),
            "approved": verdict.approved,
            "justification": verdict.justification,
            "violated_rules": list(verdict.violated_rules),
        }
        if verdict.approved:
            context.note("reflection", payload)
            self.verify_log.append(1)
            return action

        feedback = render_prompt(
            "sr_feedback", settings.prompt_version, call=action.describe(),
            justification=verdict.justification or "None",
            violated="\n".join(f"- {rule}" for rule in verdict.violated_rules) or "None",
        )
        revised = self.plan(context, providers, list(context.history) + [ChatMessage(role="system", content=feedback)])
        payload["revised"] = _describe(revised)
        context.note("reflection", payload)
        if isinstance(revised, ToolCall):
            self.verify_log.append(1)
        return revised

    def _rules(self, context: StrategyContext, providers: Mapping[str, Any]) -> List[str]:
        """Rules for the conversation so far; re-retrieved only when a new user query arrives."""
        queries = context.user_queries()
        cached = context.scratch.get("sr_rules")
        if cached is not None and cached[0] == len(queries):
            return cached[1]
        settings = self.settings
        rules = sr_retrieve_rules(
            queries, context.policy_doc, providers["retriever"],
            temperature=settings.subagent_temperature, model=settings.model, seed=context.seed,
            prompt_version=settings.prompt_version,
        )
        context.scratch["sr_rules"] = (len(queries), rules)
        return rules
