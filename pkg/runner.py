"""
Trial and experiment driver.

run_trial plays one conversation: the agent greets, the simulated user
answers, and the strategy picks actions until the user stops, the agent
hands off, or a limit is hit. run_experiment runs every task n times on a
worker pool and folds the rewards into a RewardMatrix.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import replace
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from environment import (
    Task, TaskSuite, compute_reward, finish, format_validation_error, read_json_document, reset, step,
)
from llm_integration import ProviderFailure, ScriptExhausted
from models import (
    AgentAction, ChatMessage, Respond, TerminalCause, Terminated, ToolCall, ToolResult, ToolSpec, UserUtterance,
)
from strategies import Strategy, StrategyError, StrategySettings, build_strategy, decide
from user_simulator import DEFAULT_STOP_TOKEN, FaultProfile, UserSimulator

logger = logging.getLogger(__name__)

EVENT_KINDS = ("user", "assistant", "tool_call", "tool_result", "reformulation", "reflection")
DEFAULT_GREETING = "Hi! How can I help you today?"

ProviderFactory = Callable[[str, int, int], Mapping[str, Any]]


class ArtifactError(ValueError):
    """A trajectory log or reward matrix file could not be read."""


class TrajectoryEvent(BaseModel):
    kind: str
    payload: Dict[str, Any] = Field(default_factory=dict)
    timestamp: Optional[str] = None

    @model_validator(mode="after")
    def _known_kind(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind '{self.kind}'")
        return self


class Trajectory(BaseModel):
    task_id: str
    strategy: str
    trial_index: int = Field(ge=0)
    trial_seed: int = 0
    attempt: int = Field(0, ge=0)
    ablation: Optional[str] = None
    events: List[TrajectoryEvent] = Field(default_factory=list)
    turn_count: int = Field(0, ge=0)
    terminal_cause: Optional[TerminalCause] = None
    reward: Optional[int] = None
    aborted: bool = False
    error: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if (self.reward is None) != (self.terminal_cause is None):
            raise ValueError("reward and terminal_cause must be set together")
        if self.reward not in (None, 0, 1):
            raise ValueError("reward must be 0 or 1")
        if self.aborted and self.reward == 1:
            raise ValueError("an aborted trial cannot be rewarded")
        users = sum(1 for event in self.events if event.kind == "user")
        if users != self.turn_count:
            raise ValueError(f"turn_count {self.turn_count} does not match {users} user events")
        return self

    def user_events(self) -> List[Tuple[int, TrajectoryEvent]]:
        """(event index, event) for every user event, in order."""
        return [(i, event) for i, event in enumerate(self.events) if event.kind == "user"]


class RunConfig(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    max_turns: int = Field(30, ge=1)
    max_actions_per_turn: int = Field(30, ge=1)
    n_trials: int = Field(5, ge=1)
    parallelism: int = Field(1, ge=1)
    seed: int = 0
    strategy: str = "function_calling"
    memory: bool = True
    constraints: bool = True
    tools: bool = True
    faults: Dict[str, FaultProfile] = Field(default_factory=dict)
    include_aborted: bool = False
    rerun_budget: int = Field(2, ge=0)
    greeting: str = Field(DEFAULT_GREETING, min_length=1)
    stop_token: str = Field(DEFAULT_STOP_TOKEN, min_length=1)
    user_model: str = ""
    user_temperature: float = Field(0.0, ge=0)
    settings: StrategySettings = Field(default_factory=StrategySettings)
    show_progress: bool = False

    def strategy_settings(self) -> StrategySettings:
        """Strategy settings with the M/C/T ablation toggles applied."""
        return replace(self.settings, irma_memory=self.memory, irma_constraints=self.constraints,
                       irma_tools=self.tools)


class MatrixRow(BaseModel):
    task_id: str
    n: int = Field(ge=0)
    c: int = Field(ge=0)
    aborted: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _bounds(self):
        if self.c > self.n:
            raise ValueError(f"task '{self.task_id}': c={self.c} exceeds n={self.n}")
        return self


class RewardMatrix(BaseModel):
    strategy: Optional[str] = None
    rows: List[MatrixRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_tasks(self):
        seen = set()
        for row in self.rows:
            if row.task_id in seen:
                raise ValueError(f"duplicate task '{row.task_id}'")
            seen.add(row.task_id)
        return self

    @property
    def task_ids(self) -> List[str]:
        return [row.task_id for row in self.rows]

    @property
    def n(self) -> Optional[int]:
        """Common trial count, or None for an empty or ragged matrix."""
        counts = {row.n for row in self.rows}
        return counts.pop() if len(counts) == 1 else None


# Seeds

def task_hash(task_id: str) -> int:
    return int.from_bytes(hashlib.sha256(task_id.encode("utf-8")).digest()[:4], "big")


def trial_seed(seed: int, trial_index: int, task_id: str, attempt: int = 0) -> int:
    return seed ^ trial_index ^ task_hash(task_id) ^ (attempt << 32)


# One trial

class _Recorder:
    def __init__(self):
        self.events: List[TrajectoryEvent] = []

    def add(self, kind: str, payload: Dict[str, Any]) -> None:
        stamp = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
        self.events.append(TrajectoryEvent(kind=kind, payload=payload, timestamp=stamp))


def _result_payload(call_id: Optional[str], result: ToolResult) -> Dict[str, Any]:
    if result.ok:
        return {"id": call_id, "payload": result.payload}
    return {"id": call_id, "error": result.error}


def run_trial(task: Task, strategy: Union[str, Strategy], providers: Mapping[str, Any], config: RunConfig,
              tools: Sequence[ToolSpec], policy: str = "", trial_index: int = 0,
              seed: Optional[int] = None, attempt: int = 0) -> Trajectory:
    """Play one conversation for `task` and score it."""
    if isinstance(strategy, str):
        strategy = build_strategy(strategy, config.strategy_settings())
    settings = strategy.settings
    if seed is None:
        seed = trial_seed(config.seed, trial_index, task.id, attempt)

    user = UserSimulator(
        task.instruction, providers["user"], config.faults.get(task.id), config.stop_token,
        temperature=config.user_temperature, model=config.user_model, seed=seed,
        prompt_version=settings.prompt_version,
    )
    state = reset(task, tools)
    context = strategy.new_context(policy, tools, seed=seed)
    recorder = _Recorder()
    error: Optional[str] = None

    action: AgentAction = Respond(config.greeting)
    calls = 0
    actions_this_turn = 0
    while True:
        if isinstance(action, ToolCall):
            calls += 1
            if not action.id:
                action = action.model_copy(update={"id": f"call_{calls}"})
            recorder.add("tool_call", {"id": action.id, "name": action.name, "arguments": action.arguments})
            context.history.append(ChatMessage(role="assistant", content=action.reasoning or "", tool_calls=[action]))
        else:
            recorder.add("assistant", {"text": action.text})
            context.history.append(ChatMessage(role="assistant", content=action.text))

        state, observation = step(state, action, user, max_turns=config.max_turns)

        if isinstance(observation, ToolResult):
            recorder.add("tool_result", _result_payload(action.id, observation))
            context.history.append(ChatMessage(role="tool", content=observation.render(), tool_call_id=action.id))
        elif isinstance(observation, UserUtterance):
            recorder.add("user", {"text": observation.text, "turn": state.turn_count,
                                  "injected": state.turn_count in user.injected_turns})
            context.history.append(ChatMessage(role="user", content=observation.text))
            actions_this_turn = 0
        elif isinstance(observation, Terminated) and observation.cause == TerminalCause.USER_STOP:
            recorder.add("user", {"text": state.transcript[-1][1], "turn": state.turn_count,
                                  "injected": False, "stop": True})

        if state.done:
            break

        actions_this_turn += 1
        if actions_this_turn > config.max_actions_per_turn:
            logger.warning("Task %s trial %d: more than %d actions in one turn", task.id, trial_index,
                           config.max_actions_per_turn)
            state = finish(state, TerminalCause.MAX_ACTIONS)
            break

        try:
            action = decide(strategy, context, providers)
        except StrategyError as e:
            logger.warning("Task %s trial %d: %s", task.id, trial_index, e)
            error = str(e)
            state = finish(state, TerminalCause.STRATEGY_ERROR)
        except ScriptExhausted as e:
            logger.warning("Task %s trial %d: script exhausted: %s", task.id, trial_index, e)
            error = str(e)
            state = finish(state, TerminalCause.SCRIPT_EXHAUSTED)
        except ProviderFailure as e:
            logger.warning("Task %s trial %d: provider failure: %s", task.id, trial_index, e)
            error = str(e)
            state = finish(state, TerminalCause.PROVIDER_FAILURE)
        finally:
            for kind, payload in context.drain_notes():
                recorder.add(kind, payload)
        if state.done:
            break

    cause = state.terminal_cause
    # Aborted trials score 0 even when the database still matches the gold digest.
    reward = 0 if cause.aborted else compute_reward(state.db, state.transcript, task)
    return Trajectory(
        task_id=task.id,
        strategy=strategy.name,
        trial_index=trial_index,
        trial_seed=seed,
        attempt=attempt,
        ablation=settings.ablation_label if strategy.name == "irma" else None,
        events=recorder.events,
        turn_count=state.turn_count,
        terminal_cause=cause,
        reward=reward,
        aborted=cause.aborted,
        error=error,
    )


# Experiments

def _run_with_reruns(task: Task, suite: TaskSuite, strategy_name: str, provider_factory: ProviderFactory,
                     config: RunConfig, trial_index: int) -> Trajectory:
    attempts = 1 if config.include_aborted else config.rerun_budget + 1
    trajectory = None
    for attempt in range(attempts):
        seed = trial_seed(config.seed, trial_index, task.id, attempt)
        providers = provider_factory(task.id, trial_index, seed)
        trajectory = run_trial(task, strategy_name, providers, config, suite.tools, suite.policy,
                               trial_index=trial_index, seed=seed, attempt=attempt)
        if not trajectory.aborted:
            return trajectory
        if attempt + 1 < attempts:
            logger.warning("Task %s trial %d aborted (%s); rerunning (attempt %d of %d)", task.id, trial_index,
                           trajectory.terminal_cause.value, attempt + 2, attempts)
    if trajectory.aborted and not config.include_aborted:
        logger.warning("Task %s trial %d still aborted after %d attempts; counting it as a failure",
                       task.id, trial_index, attempts)
    return trajectory


def reward_matrix(trajectories: Sequence[Trajectory], strategy: Optional[str] = None) -> RewardMatrix:
    """Fold trajectories into per-task (n, c) rows ordered by task id."""
    rows: Dict[str, MatrixRow] = {}
    for trajectory in sorted(trajectories, key=lambda t: (t.task_id, t.trial_index)):
        row = rows.setdefault(trajectory.task_id, MatrixRow(task_id=trajectory.task_id, n=0, c=0))
        row.n += 1
        row.c += 1 if trajectory.reward == 1 and not trajectory.aborted else 0
        row.aborted += 1 if trajectory.aborted else 0
    return RewardMatrix(strategy=strategy, rows=list(rows.values()))


def run_experiment(suite: TaskSuite, strategy: str, provider_factory: ProviderFactory,
                   config: RunConfig) -> Tuple[RewardMatrix, List[Trajectory]]:
    """Run n_trials independent trials of every task in `suite`."""
    jobs = [(task, i) for task in suite.tasks for i in range(config.n_trials)]
    logger.info("Running %s on %d tasks x %d trials (parallelism %d)", strategy, len(suite.tasks),
                config.n_trials, config.parallelism)

    trajectories: List[Trajectory] = []
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = [
            pool.submit(_run_with_reruns, task, suite, strategy, provider_factory, config, i)
            for task, i in jobs
        ]
        with tqdm(total=len(futures), desc=strategy, unit="trial", disable=not config.show_progress) as bar:
            for future in as_completed(futures):
                trajectories.append(future.result())
                bar.update(1)

    trajectories.sort(key=lambda t: (t.task_id, t.trial_index))
    return reward_matrix(trajectories, strategy), trajectories


# Artifacts

def normalize_timestamps(trajectory: Trajectory) -> Trajectory:
    events = [event.model_copy(update={"timestamp": None}) for event in trajectory.events]
    return trajectory.model_copy(update={"events": events})


def write_trajectories(path: str, trajectories: Sequence[Trajectory], append: bool = True) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for trajectory in trajectories:
            f.write(trajectory.model_dump_json() + "\n")


def read_trajectories(path: str) -> List[Trajectory]:
    if not os.path.exists(path):
        raise ArtifactError(f"{path}: file not found")
    trajectories = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                trajectories.append(Trajectory.model_validate_json(line))
            except ValidationError as e:
                raise ArtifactError(format_validation_error(e, f"{path}:{number}: ")) from e
    return trajectories


def find_trajectory(trajectories: Sequence[Trajectory], task_id: str, trial_index: int) -> Optional[Trajectory]:
    for trajectory in trajectories:
        if trajectory.task_id == task_id and trajectory.trial_index == trial_index:
            return trajectory
    return None


def save_reward_matrix(path: str, matrix: RewardMatrix) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(matrix.model_dump(mode="json"), f, indent=2)
        f.write("\n")


def load_reward_matrix(path: str) -> RewardMatrix:
    data = read_json_document(path, ArtifactError)
    try:
        return RewardMatrix.model_validate(data)
    except ValidationError as e:
        raise ArtifactError(format_validation_error(e, f"{path}: ")) from e
