"""Data model shared by every stage: samples, personas, turns, trajectories.

A *turn* is one user utterance followed by the agent's complete response
episode (every tool invocation up to and including the user-facing message).
User reflections are kept on the turn for auditability but never rendered
into anything the agent or the judge sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Union

__all__ = [
    "AgentMessage",
    "GradingNote",
    "PersonaKind",
    "PersonaTemplate",
    "TaskSample",
    "Termination",
    "ToolInvocation",
    "TranscriptViews",
    "Trajectory",
    "TrialSet",
    "Turn",
    "load_trajectory",
    "prefix",
    "render_views",
    "save_trajectory",
    "trajectory_path",
    "validate_sample",
]

NO_TOOL_CALLS = "(no tool calls)"
NO_RESPONSE = "(no agent response)"
NO_TURNS = "(no turns: the conversation is empty)"


class PersonaKind(str, Enum):
    EXPERT = "expert"
    NON_EXPERT = "non_expert"


class Termination(str, Enum):
    USER_TERMINATED = "user_terminated"
    MAX_TURNS_REACHED = "max_turns_reached"
    AGENT_ERROR = "agent_error"
    # only produced by prefix()
    TRUNCATED = "truncated"


@dataclass(frozen=True)
class GradingNote:
    id: str
    text: str


@dataclass(frozen=True)
class TaskSample:
    id: str
    instruction: str
    grading_notes: tuple[GradingNote, ...]
    max_turns: int
    n_trials: int
    dataset_tag: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "instruction": self.instruction,
            "grading_notes": [{"id": n.id, "text": n.text} for n in self.grading_notes],
            "max_turns": self.max_turns,
            "n_trials": self.n_trials,
            "dataset_tag": self.dataset_tag,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskSample":
        return cls(
            id=str(data["id"]),
            instruction=data["instruction"],
            grading_notes=tuple(
                GradingNote(id=str(n["id"]), text=n["text"]) for n in data["grading_notes"]
            ),
            max_turns=data["max_turns"],
            n_trials=data["n_trials"],
            dataset_tag=data.get("dataset_tag", ""),
        )


def validate_sample(sample: TaskSample) -> list[str]:
    """Return the list of violated invariants; an empty list means the sample is ok."""
    problems: list[str] = []
    if not str(sample.id).strip():
        problems.append("empty id")
    if not sample.instruction or not sample.instruction.strip():
        problems.append("empty instruction")
    if len(sample.grading_notes) == 0:
        problems.append("empty grading_notes")
    seen: set[str] = set()
    for note in sample.grading_notes:
        if note.id in seen:
            problems.append(f"duplicate id: {note.id}")
        seen.add(note.id)
        if not note.text or not note.text.strip():
            problems.append(f"empty grading note text: {note.id}")
    if not isinstance(sample.max_turns, int) or isinstance(sample.max_turns, bool) or sample.max_turns < 1:
        problems.append(f"max_turns must be a positive integer, got {sample.max_turns!r}")
    if not isinstance(sample.n_trials, int) or isinstance(sample.n_trials, bool) or sample.n_trials < 1:
        problems.append(f"n_trials must be a positive integer, got {sample.n_trials!r}")
    return problems


@dataclass(frozen=True)
class PersonaTemplate:
    kind: PersonaKind
    system_text: str


@dataclass(frozen=True)
class ToolInvocation:
    name: str
    arguments: str
    result: str
    call_id: str = ""


@dataclass(frozen=True)
class AgentMessage:
    text: str


AgentEvent = Union[ToolInvocation, AgentMessage]


@dataclass(frozen=True)
class Turn:
    index: int
    user_utterance: str
    user_reflection: str = ""
    agent_events: tuple[AgentEvent, ...] = ()

    @property
    def tool_invocations(self) -> list[ToolInvocation]:
        return [e for e in self.agent_events if isinstance(e, ToolInvocation)]

    @property
    def agent_messages(self) -> list[str]:
        return [e.text for e in self.agent_events if isinstance(e, AgentMessage)]


@dataclass(frozen=True)
class Trajectory:
    sample_id: str
    persona_kind: PersonaKind
    trial_index: int
    turns: tuple[Turn, ...]
    termination: Termination
    started_at: str = ""
    finished_at: str = ""
    # what the user said/thought when it ended the conversation, if it did
    final_user_message: str = ""
    final_reflection: str = ""
    error: str = ""

    def __post_init__(self) -> None:
        for expected, turn in enumerate(self.turns, start=1):
            if turn.index != expected:
                raise ValueError(
                    f"turn indices must be contiguous from 1; got {turn.index} at position {expected}"
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "persona_kind": self.persona_kind.value,
            "trial_index": self.trial_index,
            "termination": self.termination.value,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "final_user_message": self.final_user_message,
            "final_reflection": self.final_reflection,
            "error": self.error,
            "turns": [_turn_to_dict(t) for t in self.turns],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Trajectory":
        return cls(
            sample_id=data["sample_id"],
            persona_kind=PersonaKind(data["persona_kind"]),
            trial_index=data["trial_index"],
            turns=tuple(_turn_from_dict(t) for t in data["turns"]),
            termination=Termination(data["termination"]),
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at", ""),
            final_user_message=data.get("final_user_message", ""),
            final_reflection=data.get("final_reflection", ""),
            error=data.get("error", ""),
        )

    def content_dict(self) -> dict[str, Any]:
        """Serialized form without wall-clock fields, used for cache keys."""
        d = self.to_dict()
        d.pop("started_at")
        d.pop("finished_at")
        return d


def _turn_to_dict(turn: Turn) -> dict[str, Any]:
    events = []
    for e in turn.agent_events:
        if isinstance(e, ToolInvocation):
            events.append(
                {
                    "type": "tool_invocation",
                    "name": e.name,
                    "arguments": e.arguments,
                    "result": e.result,
                    "call_id": e.call_id,
                }
            )
        else:
            events.append({"type": "agent_message", "text": e.text})
    return {
        "index": turn.index,
        "user_utterance": turn.user_utterance,
        "user_reflection": turn.user_reflection,
        "agent_events": events,
    }


def _turn_from_dict(data: dict[str, Any]) -> Turn:
    events: list[AgentEvent] = []
    for e in data["agent_events"]:
        if e["type"] == "tool_invocation":
            events.append(
                ToolInvocation(
                    name=e["name"],
                    arguments=e["arguments"],
                    result=e["result"],
                    call_id=e.get("call_id", ""),
                )
            )
        elif e["type"] == "agent_message":
            events.append(AgentMessage(text=e["text"]))
        else:
            raise ValueError(f"unknown agent event type {e['type']!r}")
    return Turn(
        index=data["index"],
        user_utterance=data["user_utterance"],
        user_reflection=data.get("user_reflection", ""),
        agent_events=tuple(events),
    )


@dataclass(frozen=True)
class TrialSet:
    sample_id: str
    persona_kind: PersonaKind
    trajectories: tuple[Trajectory, ...]
    # trial_index -> error message, for trials that could not be produced at all
    failures: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        indices = [t.trial_index for t in self.trajectories]
        if len(set(indices)) != len(indices):
            raise ValueError(f"duplicate trial indices in trial set: {indices}")


def prefix(trajectory: Trajectory, t: int) -> Trajectory:
    """Turns 1..min(t, len) of ``trajectory``; saturates when ``t`` exceeds the length."""
    if t < 0:
        raise ValueError(f"prefix length must be >= 0, got {t}")
    if t >= len(trajectory.turns):
        return trajectory
    return replace(
        trajectory,
        turns=trajectory.turns[:t],
        termination=Termination.TRUNCATED,
        final_user_message="",
        final_reflection="",
        error="",
    )


@dataclass(frozen=True)
class TranscriptViews:
    """Judge-facing renderings of a trajectory, one block per turn."""

    intermediate_blocks: tuple[str, ...]
    response_blocks: tuple[str, ...]
    dialogue_blocks: tuple[str, ...]

    @property
    def intermediate(self) -> str:
        return "\n".join(self.intermediate_blocks) if self.intermediate_blocks else NO_TURNS

    @property
    def responses(self) -> str:
        return "\n".join(self.response_blocks) if self.response_blocks else NO_TURNS

    @property
    def dialogue(self) -> str:
        body = "\n".join(self.dialogue_blocks) if self.dialogue_blocks else NO_TURNS
        return f"[Dynamic Dialogue]:\n{body}"

    def truncate(self, t: int) -> "TranscriptViews":
        return TranscriptViews(
            self.intermediate_blocks[:t], self.response_blocks[:t], self.dialogue_blocks[:t]
        )


def render_views(trajectory: Trajectory) -> TranscriptViews:
    intermediate, responses, dialogue = [], [], []
    for turn in trajectory.turns:
        header = f"Turn {turn.index}:"
        calls = turn.tool_invocations
        if calls:
            lines = [header]
            for call in calls:
                lines.append(f"  tool_call: {call.name}({call.arguments})")
                lines.append(f"  tool_result: {call.result}")
            intermediate.append("\n".join(lines))
        else:
            intermediate.append(f"{header} {NO_TOOL_CALLS}")

        messages = turn.agent_messages
        if messages:
            responses.append("\n".join(f"{header} {m}" for m in messages))
        else:
            responses.append(f"{header} {NO_RESPONSE}")

        lines = [f"Turn {turn.index}", f"USER: {turn.user_utterance}"]
        lines.extend(f"AGENT: {m}" for m in messages)
        dialogue.append("\n".join(lines))
    return TranscriptViews(tuple(intermediate), tuple(responses), tuple(dialogue))


def trajectory_path(root: Path, run_id: str, sample_id: str, persona: PersonaKind | str, trial_index: int) -> Path:
    persona_value = persona.value if isinstance(persona, PersonaKind) else persona
    return Path(root) / "runs" / run_id / sample_id / persona_value / f"trial_{trial_index}.json"


def save_trajectory(trajectory: Trajectory, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trajectory.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_trajectory(path: Path) -> Trajectory:
    return Trajectory.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def tool_names(trajectories: Iterable[Trajectory]) -> set[str]:
    return {call.name for traj in trajectories for turn in traj.turns for call in turn.tool_invocations}
