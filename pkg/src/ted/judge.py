"""Grading-note judging, majority voting and per-turn progress curves."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

from .gateway import ChatMessage, ChatRequest, Provider
from .prompts import JUDGE_TEMPLATE, fill
from .trajectory import GradingNote, TaskSample, Trajectory, prefix, render_views

logger = logging.getLogger(__name__)

DEFAULT_Q = 5
DEFAULT_JUDGE_TEMPERATURE = 0.7
PARSE_RETRIES = 2

_GRADE_RE = re.compile(r"GRADE:[ \t]*\**[ \t]*([A-Za-z])\b", re.IGNORECASE)


class Grade(str, Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    UNPARSEABLE = "unparseable"


def parse_grade(reply: str) -> Grade:
    """Read the last ``GRADE: <letter>`` in a judge reply."""
    matches = _GRADE_RE.findall(reply or "")
    if not matches:
        return Grade.UNPARSEABLE
    letter = matches[-1].upper()
    if letter == "C":
        return Grade.COMPLETE
    if letter == "I":
        return Grade.INCOMPLETE
    return Grade.UNPARSEABLE


@dataclass(frozen=True)
class SubgoalVerdict:
    grade: Grade  # never UNPARSEABLE; see ``unparseable``
    explanation: str
    run_index: int
    unparseable: bool = False

    @property
    def complete(self) -> bool:
        return self.grade is Grade.COMPLETE

    def to_dict(self) -> dict[str, Any]:
        return {
            "grade": self.grade.value,
            "explanation": self.explanation,
            "run_index": self.run_index,
            "unparseable": self.unparseable,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SubgoalVerdict":
        return cls(Grade(d["grade"]), d["explanation"], d["run_index"], d.get("unparseable", False))


@dataclass(frozen=True)
class SubgoalAssessment:
    grading_note_id: str
    verdicts: tuple[SubgoalVerdict, ...]

    @property
    def q(self) -> int:
        return len(self.verdicts)

    @property
    def completes(self) -> int:
        return sum(v.complete for v in self.verdicts)

    @property
    def z(self) -> float:
        return self.completes / self.q

    @property
    def majority(self) -> Grade:
        # strict majority; an even Q tie counts as incomplete
        return Grade.COMPLETE if 2 * self.completes > self.q else Grade.INCOMPLETE

    @property
    def invalid(self) -> bool:
        return all(v.unparseable for v in self.verdicts)

    @property
    def explanations(self) -> list[str]:
        return [v.explanation for v in self.verdicts]

    def to_dict(self) -> dict[str, Any]:
        return {
            "grading_note_id": self.grading_note_id,
            "z": self.z,
            "majority": self.majority.value,
            "invalid": self.invalid,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SubgoalAssessment":
        return cls(d["grading_note_id"], tuple(SubgoalVerdict.from_dict(v) for v in d["verdicts"]))


class InvalidAssessmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProgressCurve:
    sample_id: str
    trial_index: int
    values: tuple[float, ...]  # p(1..T_max)
    achieved_turn: dict[str, int | None] = field(default_factory=dict)
    n_turns: int = 0

    @property
    def terminal(self) -> float:
        return self.values[-1] if self.values else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "trial_index": self.trial_index,
            "values": list(self.values),
            "achieved_turn": dict(self.achieved_turn),
            "n_turns": self.n_turns,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProgressCurve":
        return cls(d["sample_id"], d["trial_index"], tuple(d["values"]), dict(d["achieved_turn"]), d.get("n_turns", 0))


def curve_from_achieved(
    sample_id: str,
    trial_index: int,
    achieved_turn: dict[str, int | None],
    t_max: int,
    n_turns: int,
) -> ProgressCurve:
    """p(t) = (#notes achieved by turn t) / |G| for t = 1..t_max; flat after the last turn."""
    total = len(achieved_turn)
    values = tuple(
        sum(1 for a in achieved_turn.values() if a is not None and a <= t) / total for t in range(1, t_max + 1)
    )
    return ProgressCurve(sample_id, trial_index, values, dict(achieved_turn), n_turns)


@dataclass
class Judge:
    """LLM-as-a-judge over grading notes, with Q-run majority voting."""

    gateway: Provider
    model: str = "gpt-4.1"
    temperature: float = DEFAULT_JUDGE_TEMPERATURE
    q: int = DEFAULT_Q
    parse_retries: int = PARSE_RETRIES
    workers: int = 1
    curve_mode: str = "bisect"

    def __post_init__(self) -> None:
        if self.q < 1 or self.q % 2 == 0:
            raise ValueError(f"Q must be a positive odd integer, got {self.q}")

    def build_prompt(self, sample: TaskSample, note: GradingNote, trajectory: Trajectory) -> str:
        views = render_views(trajectory)
        return fill(
            JUDGE_TEMPLATE,
            user_task_summary=sample.instruction,
            grading_note=note.text,
            trajectory=views.intermediate,
            agent_responses=views.responses,
            dynamicDialogue=views.dialogue,
        )

    def judge_once(self, sample: TaskSample, note: GradingNote, trajectory: Trajectory, run_index: int = 1) -> SubgoalVerdict:
        request = ChatRequest(
            model=self.model,
            messages=(ChatMessage("user", self.build_prompt(sample, note, trajectory)),),
            temperature=self.temperature,
            request_tag="judge",
        )
        reply = ""
        for _ in range(1 + self.parse_retries):
            reply = self.gateway.complete(request).content
            grade = parse_grade(reply)
            if grade is not Grade.UNPARSEABLE:
                return SubgoalVerdict(grade, reply, run_index)
        logger.warning("unparseable judge reply for note %s after retries; counting incomplete", note.id)
        return SubgoalVerdict(Grade.INCOMPLETE, reply, run_index, unparseable=True)

    def assess_subgoal(self, sample: TaskSample, note: GradingNote, trajectory: Trajectory) -> SubgoalAssessment:
        # sequential on purpose: replayed identical prompts must map to run indices deterministically
        verdicts = tuple(self.judge_once(sample, note, trajectory, q) for q in range(1, self.q + 1))
        return SubgoalAssessment(note.id, verdicts)

    def assess_all(self, sample: TaskSample, trajectory: Trajectory) -> list[SubgoalAssessment]:
        notes = list(sample.grading_notes)
        if self.workers <= 1:
            return [self.assess_subgoal(sample, n, trajectory) for n in notes]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda n: self.assess_subgoal(sample, n, trajectory), notes))

    def progress(self, sample: TaskSample, trajectory: Trajectory) -> float:
        assessments = self.assess_all(sample, trajectory)
        bad = [a.grading_note_id for a in assessments if a.invalid]
        if bad:
            raise InvalidAssessmentError(f"every judge reply was unparseable for notes {bad}")
        return progress_from_assessments(assessments)

    def progress_curve(
        self,
        sample: TaskSample,
        trajectory: Trajectory,
        mode: str | None = None,
        t_max: int | None = None,
        cache: dict[tuple[str, int], SubgoalAssessment] | None = None,
    ) -> ProgressCurve:
        """Per-turn progress by re-judging trajectory prefixes.

        ``cache`` maps (note id, prefix length) to assessments and is filled in
        place, so callers can reuse the full-trajectory assessments.
        """
        if cache is None:
            cache = {}
        n_turns = len(trajectory.turns)
        if n_turns < 1:
            raise ValueError("progress_curve needs a trajectory with at least one turn")

        def assess(note: GradingNote, t: int) -> SubgoalAssessment:
            key = (note.id, t)
            if key not in cache:
                cache[key] = self.assess_subgoal(sample, note, prefix(trajectory, t))
            return cache[key]

        def complete_at(note: GradingNote) -> Callable[[int], bool]:
            return lambda t: assess(note, t).majority is Grade.COMPLETE

        mode = mode or self.curve_mode
        achieved = {note.id: find_achieved_turn(complete_at(note), n_turns, mode) for note in sample.grading_notes}
        return curve_from_achieved(sample.id, trajectory.trial_index, achieved, t_max or sample.max_turns, n_turns)


def find_achieved_turn(complete_at: Callable[[int], bool], n_turns: int, mode: str) -> int | None:
    """Earliest t in 1..n_turns with complete_at(t), or None.

    ``exhaustive`` probes every prefix; ``bisect`` assumes completion cannot be
    undone and binary-searches, probing O(log n) prefixes.
    """
    if mode == "exhaustive":
        for t in range(1, n_turns + 1):
            if complete_at(t):
                return t
        return None
    if mode != "bisect":
        raise ValueError(f"unknown curve mode {mode!r}")
    if not complete_at(n_turns):
        return None
    lo, hi = 1, n_turns
    while lo < hi:
        mid = (lo + hi) // 2
        if complete_at(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


def progress_from_assessments(assessments: Sequence[SubgoalAssessment]) -> float:
    if not assessments:
        raise ValueError("no assessments")
    done = sum(a.majority is Grade.COMPLETE for a in assessments)
    return done / len(assessments)
