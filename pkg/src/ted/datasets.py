"""Grading-note datasets: strict loading, saving, and milestone conversion."""

from __future__ import annotations

import json
from dataclasses import dataclass
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Any, Sequence

from .gateway import ChatMessage, ChatRequest, Provider
from .prompts import JSON_REPAIR_TEMPLATE, MILESTONE_JSON_SCHEMA, MILESTONE_TEMPLATE, fill
from .trajectory import GradingNote, TaskSample, validate_sample

CONSTRAINT_TYPES = ("snapshot_similarity", "addition_similarity", "removal_similarity", "update_similarity")
STAGING_KIND = "ted-staged-grading-notes"


class DatasetError(ValueError):
    def __init__(self, message: str, problems: Sequence[str] = ()):
        self.problems = list(problems)
        detail = "".join(f"\n  - {p}" for p in self.problems)
        super().__init__(message + detail)


def parse_dataset(data: Any) -> list[TaskSample]:
    """Validate a decoded dataset; all-or-nothing."""
    if not isinstance(data, list):
        raise DatasetError("dataset must be a JSON list of task samples (staged files must be promoted first)")
    samples: list[TaskSample] = []
    problems: list[str] = []
    seen: set[str] = set()
    for position, raw in enumerate(data):
        label = f"sample #{position}"
        try:
            sample = TaskSample.from_dict(raw)
        except (KeyError, TypeError, AttributeError) as exc:
            problems.append(f"{label}: malformed record ({type(exc).__name__}: {exc})")
            continue
        label = f"sample {sample.id!r}"
        problems.extend(f"{label}: {p}" for p in validate_sample(sample))
        if sample.id in seen:
            problems.append(f"{label}: duplicate id")
        seen.add(sample.id)
        samples.append(sample)
    if problems:
        raise DatasetError(f"dataset rejected ({len(problems)} problem(s))", problems)
    return samples


def load_dataset(path: str | Path) -> list[TaskSample]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise DatasetError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context}") from exc
    try:
        return parse_dataset(data)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc.args[0].splitlines()[0]}", exc.problems) from None


def save_dataset(samples: Sequence[TaskSample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([s.to_dict() for s in samples], indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Milestone:
    index: int
    constraint_type: str
    details: Any

    def describe(self) -> str:
        details = self.details if isinstance(self.details, str) else json.dumps(self.details, ensure_ascii=False)
        return f"Milestone {self.index}: constraint type {self.constraint_type}; {details}"


@dataclass(frozen=True)
class MilestoneScenario:
    scenario_name: str
    description: str
    milestones: tuple[Milestone, ...]
    dag_edges: tuple[tuple[int, int], ...] = ()
    # extras carried into staged samples
    instruction: str = ""
    max_turns: int = 8
    n_trials: int = 8
    dataset_tag: str = "toolsandbox"

    def __post_init__(self) -> None:
        indices = [m.index for m in self.milestones]
        if len(set(indices)) != len(indices):
            raise ValueError(f"{self.scenario_name}: duplicate milestone indices {indices}")
        for m in self.milestones:
            if m.constraint_type not in CONSTRAINT_TYPES:
                raise ValueError(f"{self.scenario_name}: unknown constraint type {m.constraint_type!r}")
        valid = set(indices)
        for i, j in self.dag_edges:
            if i not in valid or j not in valid:
                raise ValueError(f"{self.scenario_name}: edge ({i}, {j}) references an unknown milestone")
        graph: dict[int, set[int]] = {m: set() for m in indices}
        for i, j in self.dag_edges:
            graph[j].add(i)
        try:
            tuple(TopologicalSorter(graph).static_order())
        except CycleError as exc:
            raise ValueError(f"{self.scenario_name}: milestone dependencies contain a cycle {exc.args[1]}") from None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MilestoneScenario":
        return cls(
            scenario_name=d["scenario_name"],
            description=d.get("description", ""),
            milestones=tuple(Milestone(m["index"], m["constraint_type"], m.get("details", "")) for m in d["milestones"]),
            dag_edges=tuple((int(i), int(j)) for i, j in d.get("dag_edges", ())),
            instruction=d.get("instruction", ""),
            max_turns=d.get("max_turns", 8),
            n_trials=d.get("n_trials", 8),
            dataset_tag=d.get("dataset_tag", "toolsandbox"),
        )


def dependency_analysis(scenario: MilestoneScenario) -> str:
    if not scenario.dag_edges:
        return "No dependencies: milestones may be completed in any order."
    return "\n".join(f"Milestone {j} depends on milestone {i}" for i, j in scenario.dag_edges)


def milestone_prompt(scenario: MilestoneScenario) -> str:
    edges = ", ".join(f"({i}, {j})" for i, j in scenario.dag_edges) or "none"
    return fill(
        MILESTONE_TEMPLATE,
        scenario_name=scenario.scenario_name,
        scenario_description=scenario.description,
        total_milestones=str(len(scenario.milestones)),
        milestone_edge_list=edges,
        dependency_analysis=dependency_analysis(scenario),
        milestones="\n".join(m.describe() for m in scenario.milestones),
        json_schema=MILESTONE_JSON_SCHEMA,
    )


def _parse_note_array(reply: str, expected: int) -> list[list[str]] | str:
    """Per-milestone note lists, or a string describing what is wrong."""
    text = reply.strip()
    if text.startswith("```"):
        text = text.strip("`")
        text = text[text.find("\n") + 1 :] if "\n" in text else text
    start, end = text.find("["), text.rfind("]")
    if start == -1 or end < start:
        return "no JSON array found"
    try:
        data = json.loads(text[start : end + 1])
    except ValueError as exc:
        return f"invalid JSON: {exc}"
    if not isinstance(data, list) or len(data) != expected:
        return f"expected a JSON array with {expected} elements, one per milestone"
    out = []
    for i, item in enumerate(data):
        notes = [item] if isinstance(item, str) else item
        if not isinstance(notes, list) or not notes or not all(isinstance(n, str) and n.strip() for n in notes):
            return f"element {i} must be a non-empty string or a non-empty array of strings"
        out.append([n.strip() for n in notes])
    return out


class ConversionError(RuntimeError):
    pass


def convert_milestones(
    gateway: Provider, scenario: MilestoneScenario, model: str = "gpt-4.1", temperature: float = 0.0, retries: int = 1
) -> list[GradingNote]:
    """Ask a model to turn milestones into grading notes (one or more per milestone)."""
    messages = [ChatMessage("user", milestone_prompt(scenario))]
    problem = ""
    for _ in range(1 + retries):
        reply = gateway.complete(
            ChatRequest(model, tuple(messages), temperature=temperature, request_tag="convert")
        ).content
        parsed = _parse_note_array(reply, len(scenario.milestones))
        if not isinstance(parsed, str):
            return [
                GradingNote(id=f"m{m.index}" + (f".{k}" if len(texts) > 1 else ""), text=text)
                for m, texts in zip(scenario.milestones, parsed)
                for k, text in enumerate(texts, start=1)
            ]
        problem = parsed
        messages += [ChatMessage("assistant", reply), ChatMessage("user", fill(JSON_REPAIR_TEMPLATE, problem=problem))]
    raise ConversionError(f"{scenario.scenario_name}: could not parse converted notes ({problem})")


def load_scenarios(path: str | Path) -> list[MilestoneScenario]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [MilestoneScenario.from_dict(d) for d in data]


def write_staging(samples: Sequence[TaskSample], path: str | Path, source: str = "") -> None:
    """Converted notes go to a staging file that the loader refuses until promoted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"kind": STAGING_KIND, "reviewed": False, "source": source, "samples": [s.to_dict() for s in samples]}
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def promote(staging_path: str | Path, out_path: str | Path) -> list[TaskSample]:
    doc = json.loads(Path(staging_path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("kind") != STAGING_KIND:
        raise DatasetError(f"{staging_path} is not a staging file")
    samples = parse_dataset(doc["samples"])
    save_dataset(samples, out_path)
    return samples


def scenario_to_sample(scenario: MilestoneScenario, notes: Sequence[GradingNote]) -> TaskSample:
    return TaskSample(
        id=scenario.scenario_name,
        instruction=scenario.instruction or scenario.description,
        grading_notes=tuple(notes),
        max_turns=scenario.max_turns,
        n_trials=scenario.n_trials,
        dataset_tag=scenario.dataset_tag,
    )
