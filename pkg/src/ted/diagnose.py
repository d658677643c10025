"""Automated error discovery over judge explanations.

Candidates are (trial, note) pairs the judge did not unanimously pass. Each
candidate is summarised into a low-level error type, then all error types
are clustered into high-level labels by one model call whose output is
checked mechanically (partition + one tool per cluster).
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .gateway import ChatMessage, ChatRequest, Provider
from .judge import SubgoalAssessment
from .metrics import trial_moments
from .prompts import CLUSTER_TEMPLATE, IDENTIFY_TEMPLATE, JSON_REPAIR_TEMPLATE, SELECTIVE_TEMPLATE, fill
from .trajectory import GradingNote

logger = logging.getLogger(__name__)

JSON_RETRIES = 2
SECTION_START = "### Known failure modes (avoid these)"
SECTION_END = "### End of known failure modes"


class DiagnosisError(RuntimeError):
    pass


class ClusteringError(DiagnosisError):
    pass


@dataclass(frozen=True)
class ErrorCandidate:
    sample_id: str
    trial_index: int
    grading_note: GradingNote
    explanations: tuple[str, ...]
    z: float

    @property
    def error_id(self) -> str:
        return f"{self.sample_id}/trial_{self.trial_index}/{self.grading_note.id}"

    @property
    def consistent_failure(self) -> bool:
        return self.z == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_id": self.error_id,
            "sample_id": self.sample_id,
            "trial_index": self.trial_index,
            "grading_note": {"id": self.grading_note.id, "text": self.grading_note.text},
            "z": self.z,
            "explanations": list(self.explanations),
        }


@dataclass(frozen=True)
class LowLevelError:
    error_id: str
    error_type: str
    explanation: str
    identified: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "error_id": self.error_id,
            "error_type": self.error_type,
            "explanation": self.explanation,
            "identified": self.identified,
        }


@dataclass(frozen=True)
class ErrorCluster:
    cluster_label: str
    error_types: tuple[str, ...]
    error_ids: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster_label": self.cluster_label,
            "error_types": list(self.error_types),
            "error_ids": list(self.error_ids),
        }


def build_candidates(
    sample_id: str,
    trial_assessments: dict[int, Sequence[SubgoalAssessment]],
    notes: Sequence[GradingNote],
) -> list[ErrorCandidate]:
    """One candidate per (trial, note) whose judges were not unanimous on complete."""
    by_id = {n.id: n for n in notes}
    out = []
    for trial_index in sorted(trial_assessments):
        for a in trial_assessments[trial_index]:
            # all-incomplete or mixed verdicts, i.e. z < 1
            if a.completes < a.q:
                out.append(
                    ErrorCandidate(sample_id, trial_index, by_id[a.grading_note_id], tuple(a.explanations), a.z)
                )
    return out


def extract_json_object(text: str) -> dict[str, Any] | None:
    text = (text or "").strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fenced:
        text = fenced.group(1).strip()
    for candidate in (text, text[text.find("{") : text.rfind("}") + 1]):
        try:
            obj = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


@dataclass
class Diagnoser:
    gateway: Provider
    model: str = "gpt-4.1"
    temperature: float = 0.0
    json_retries: int = JSON_RETRIES
    workers: int = 1
    tool_names: frozenset[str] = field(default_factory=frozenset)

    def _ask_json(self, prompt: str, tag: str, required: Sequence[str]) -> dict[str, Any] | None:
        messages = [ChatMessage("user", prompt)]
        for attempt in range(1 + self.json_retries):
            reply = self.gateway.complete(
                ChatRequest(self.model, tuple(messages), temperature=self.temperature, request_tag=tag)
            ).content
            obj = extract_json_object(reply)
            missing = [k for k in required if not (obj and isinstance(obj.get(k), str) and obj[k].strip())]
            if obj is not None and not missing:
                return obj
            problem = "it was not valid JSON" if obj is None else f"missing or empty keys {missing}"
            messages += [ChatMessage("assistant", reply), ChatMessage("user", fill(JSON_REPAIR_TEMPLATE, problem=problem))]
        return None

    def _identify_one(self, note: GradingNote, explanation: str) -> dict[str, Any] | None:
        prompt = fill(IDENTIFY_TEMPLATE, subgoals=note.text, explanation=explanation)
        return self._ask_json(prompt, "diagnose_identify", ("error_type",))

    def identify_error(self, candidate: ErrorCandidate) -> LowLevelError:
        if candidate.consistent_failure:
            obj = self._identify_one(candidate.grading_note, candidate.explanations[0])
            if obj is None:
                return LowLevelError(candidate.error_id, "", "", identified=False)
            return LowLevelError(candidate.error_id, obj["error_type"].strip(), str(obj.get("explanation", "")))

        identified = [self._identify_one(candidate.grading_note, e) for e in candidate.explanations]
        types = [o["error_type"].strip() for o in identified if o is not None]
        if not types:
            return LowLevelError(candidate.error_id, "", "", identified=False)
        prompt = fill(SELECTIVE_TEMPLATE, error_type_list=json.dumps(types, ensure_ascii=False))
        obj = self._ask_json(prompt, "diagnose_select", ("most_probable_error_type",))
        if obj is None:
            return LowLevelError(candidate.error_id, "", "", identified=False)
        chosen = obj["most_probable_error_type"].strip()
        explanation = next(
            (str(o.get("explanation", "")) for o in identified if o is not None and o["error_type"].strip() == chosen),
            "",
        )
        return LowLevelError(candidate.error_id, chosen, explanation)

    def identify_errors(self, candidates: Sequence[ErrorCandidate]) -> list[LowLevelError]:
        if self.workers <= 1:
            return [self.identify_error(c) for c in candidates]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(self.identify_error, candidates))

    def cluster_errors(self, errors: Sequence[LowLevelError], notes: Iterable[GradingNote]) -> list[ErrorCluster]:
        errors = [e for e in errors if e.identified]
        if not errors:
            raise ClusteringError("no identified errors to cluster")
        subgoals = sorted({n.text for n in notes})
        listing = [{"error_id": e.error_id, "error_type": e.error_type} for e in errors]
        prompt = fill(
            CLUSTER_TEMPLATE,
            subgoals=json.dumps(subgoals, ensure_ascii=False),
            error_types=json.dumps(listing, ensure_ascii=False, indent=1),
        )
        messages = [ChatMessage("user", prompt)]
        problems: list[str] = []
        for attempt in range(2):
            reply = self.gateway.complete(
                ChatRequest(self.model, tuple(messages), temperature=self.temperature, request_tag="diagnose_cluster")
            ).content
            clusters, problems = parse_clusters(reply, errors, self.tool_names)
            if not problems:
                return clusters
            logger.warning("cluster output rejected: %s", "; ".join(problems))
            messages += [
                ChatMessage("assistant", reply),
                ChatMessage("user", fill(JSON_REPAIR_TEMPLATE, problem="; ".join(problems))),
            ]
        raise ClusteringError("invalid clustering after repair retry: " + "; ".join(problems))


_SNAKE_RE = re.compile(r"\b[a-z][a-z0-9]*(?:_[a-z0-9]+)+\b")


def mentioned_tools(text: str, known: Iterable[str] = ()) -> set[str]:
    """Tool names referenced in ``text``: known names if given, else snake_case identifiers."""
    known = set(known)
    if known:
        return {t for t in known if re.search(rf"(?<![A-Za-z0-9_]){re.escape(t)}(?![A-Za-z0-9_])", text)}
    return set(_SNAKE_RE.findall(text))


def parse_clusters(
    reply: str, errors: Sequence[LowLevelError], tool_names: Iterable[str] = ()
) -> tuple[list[ErrorCluster], list[str]]:
    """Parse and validate a clustering reply; returns (clusters, problems)."""
    obj = extract_json_object(reply)
    if obj is None or not isinstance(obj.get("clusters"), list):
        return [], ["reply is not a JSON object with a 'clusters' list"]
    clusters = []
    problems = []
    for i, raw in enumerate(obj["clusters"]):
        if not isinstance(raw, dict) or not isinstance(raw.get("cluster_label"), str) or not raw["cluster_label"].strip():
            problems.append(f"cluster {i} has no cluster_label")
            continue
        ids = raw.get("error_ids") or []
        types = raw.get("error_types") or []
        if not isinstance(ids, list) or not isinstance(types, list):
            problems.append(f"cluster {i} error_ids/error_types must be lists")
            continue
        clusters.append(ErrorCluster(raw["cluster_label"].strip(), tuple(map(str, types)), tuple(map(str, ids))))
    problems += validate_partition(clusters, errors, tool_names)
    return clusters, problems


def validate_partition(
    clusters: Sequence[ErrorCluster], errors: Sequence[LowLevelError], tool_names: Iterable[str] = ()
) -> list[str]:
    problems = []
    by_id = {e.error_id: e for e in errors}
    seen: dict[str, int] = {}
    for i, cluster in enumerate(clusters):
        if not cluster.error_ids:
            problems.append(f"cluster {cluster.cluster_label!r} is empty")
        for eid in cluster.error_ids:
            if eid not in by_id:
                problems.append(f"unknown error id {eid!r}")
            elif eid in seen:
                problems.append(f"error id {eid!r} appears in more than one cluster")
            seen.setdefault(eid, i)
        tools = set()
        for eid in cluster.error_ids:
            if eid in by_id:
                tools |= mentioned_tools(by_id[eid].error_type, tool_names)
        if len(tools) > 1:
            problems.append(f"cluster {cluster.cluster_label!r} mixes different tools: {sorted(tools)}")
    missing = sorted(set(by_id) - set(seen))
    if missing:
        problems.append(f"error ids missing from every cluster: {missing}")
    return problems


def scatter_data(trial_assessments: dict[int, Sequence[SubgoalAssessment]]) -> list[tuple[int, float, float]]:
    """(trial_index, E[progress], Var[progress]) for every trial."""
    return [(t, *trial_moments([a.z for a in trial_assessments[t]])) for t in sorted(trial_assessments)]


def error_insertion(agent_instruction: str, clusters: Sequence[ErrorCluster], human_notes: Sequence[str] = ()) -> str:
    """Append discovered error labels verbatim to an agent instruction.

    Re-running replaces the previously inserted section, so the result is idempotent.
    """
    labels = [c.cluster_label for c in clusters] + list(human_notes)
    if not labels:
        return agent_instruction
    base = strip_error_section(agent_instruction)
    section = "\n".join([SECTION_START, *(f"- {label}" for label in labels), SECTION_END])
    return f"{base.rstrip()}\n\n{section}\n" if base.strip() else f"{section}\n"


def strip_error_section(text: str) -> str:
    start = text.find(SECTION_START)
    if start == -1:
        return text
    end = text.find(SECTION_END, start)
    end = len(text) if end == -1 else end + len(SECTION_END)
    rest = text[end:].lstrip("\n")
    return text[:start].rstrip() + ("\n\n" + rest if rest else "\n")
