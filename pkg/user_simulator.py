"""
Simulated user.

The user model sees its task instruction as a system prompt and the agent's
messages as the other side of the conversation. It ends the conversation by
replying with the stop token. A FaultProfile replaces one chosen user turn
with a scripted deviation so instruction drift can be reproduced on demand.
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Set

from llm_integration import CompletionRequest, complete
from models import ChatMessage, Stop, TransferAccepted, UserTurn, Utterance
from prompts import DEFAULT_VERSION, render_prompt

logger = logging.getLogger(__name__)

DEFAULT_STOP_TOKEN = "###STOP###"

_FAULT_SPEC = re.compile(r"^\s*(\d+)\s*:\s*(.+?)\s*$", re.DOTALL)


@dataclass(frozen=True)
class FaultProfile:
    enabled: bool = False
    deviation_turn: int = 1
    deviation_text: str = ""

    def __post_init__(self):
        if self.enabled and self.deviation_turn < 1:
            raise ValueError("deviation_turn must be >= 1")

    @classmethod
    def parse(cls, spec: str) -> "FaultProfile":
        """Parse the config form '<turn>: <deviation text>'."""
        match = _FAULT_SPEC.match(spec or "")
        if not match:
            raise ValueError(f"fault must look like '<turn>: <text>', got {spec!r}")
        return cls(enabled=True, deviation_turn=int(match.group(1)), deviation_text=match.group(2))


def detect_stop(text: str, stop_token: str = DEFAULT_STOP_TOKEN) -> bool:
    return text.strip() == stop_token


def build_user_request(instruction: str, history: List[ChatMessage], stop_token: str = DEFAULT_STOP_TOKEN,
                       temperature: float = 0.0, model: str = "", seed: Optional[int] = None,
                       prompt_version: str = DEFAULT_VERSION) -> CompletionRequest:
    # Roles are mirrored: the agent is the "user" of the user model.
    messages = [ChatMessage(role="system", content=render_prompt(
        "user_system", prompt_version, instruction=instruction, stop_token=stop_token))]
    for message in history:
        if message.role == "assistant":
            messages.append(ChatMessage(role="user", content=message.content))
        elif message.role == "user":
            messages.append(ChatMessage(role="assistant", content=message.content))
    return CompletionRequest(model=model, messages=messages, temperature=temperature, seed=seed)


def next_user_utterance(instruction: str, history: List[ChatMessage], provider,
                        fault: Optional[FaultProfile] = None, stop_token: str = DEFAULT_STOP_TOKEN,
                        temperature: float = 0.0, model: str = "", seed: Optional[int] = None,
                        prompt_version: str = DEFAULT_VERSION) -> UserTurn:
    if not history or history[-1].role != "assistant":
        raise ValueError("the simulated user can only reply to an assistant message")

    turn_index = 1 + sum(1 for m in history if m.role == "user")
    if fault is not None and fault.enabled and turn_index == fault.deviation_turn:
        logger.info("Injecting user deviation at turn %d", turn_index)
        return Utterance(fault.deviation_text)

    request = build_user_request(instruction, history, stop_token, temperature, model, seed, prompt_version)
    text = complete(provider, request).content.strip()
    if detect_stop(text, stop_token):
        return Stop(text)
    return Utterance(text)


class UserSimulator:
    """Per-trial user handle driven by the environment's step()."""

    def __init__(self, instruction: str, provider, fault: Optional[FaultProfile] = None,
                 stop_token: str = DEFAULT_STOP_TOKEN, temperature: float = 0.0, model: str = "",
                 seed: Optional[int] = None, prompt_version: str = DEFAULT_VERSION):
        self.instruction = instruction
        self.provider = provider
        self.fault = fault
        self.stop_token = stop_token
        self.temperature = temperature
        self.model = model
        self.seed = seed
        self.prompt_version = prompt_version
        self.history: List[ChatMessage] = []
        self.injected_turns: Set[int] = set()
        self.finished = False

    @property
    def turns(self) -> int:
        return sum(1 for m in self.history if m.role == "user")

    def reply(self, agent_text: str) -> UserTurn:
        if self.finished:
            raise RuntimeError("the conversation has already ended")
        self.history.append(ChatMessage(role="assistant", content=agent_text))
        turn = next_user_utterance(
            self.instruction, self.history, self.provider, self.fault, self.stop_token,
            self.temperature, self.model, self.seed, self.prompt_version,
        )
        if isinstance(turn, Stop):
            self.finished = True
        if self.fault is not None and self.fault.enabled and self.turns + 1 == self.fault.deviation_turn:
            self.injected_turns.add(self.fault.deviation_turn)
        self.history.append(ChatMessage(role="user", content=turn.text))
        return turn

    def accept_transfer(self) -> UserTurn:
        self.finished = True
        return TransferAccepted()
