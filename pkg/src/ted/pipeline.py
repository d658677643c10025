"""Talk -> judge -> diagnose orchestration with content-keyed, resumable artifacts.

Layout under ``<out>/runs/<run_id>/``::

    <sample>/<persona>/trial_<l>.json        trajectory
    <sample>/<persona>/trial_<l>.meta.json   talk cache key
    <sample>/<persona>/judge_<l>.json        verdicts, curve, moments
    <sample>/<persona>/diagnosis.json        candidates, errors, clusters
    <sample>/<persona>/scatter.csv           trial_index, expectation, variance
    diagnosis_<persona>.json                 cluster_scope = dataset only
    report/                                  written by ``ted report``

An artifact is never rewritten: if it exists with the same key it is reused,
and a different key is an error (start a new run id instead).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import prompts
from .config import ConfigError, RunConfig
from .datasets import load_dataset
from .diagnose import (
    Diagnoser,
    ErrorCandidate,
    ErrorCluster,
    LowLevelError,
    build_candidates,
    scatter_data,
)
from .gateway import LiveProvider, Provider, RecordingProvider, make_provider
from .judge import Grade, Judge, ProgressCurve, SubgoalAssessment, SubgoalVerdict, curve_from_achieved
from .metrics import TrialOutcome, trial_moments
from .talk import AgentConnector, ReferenceAgent, ScriptedAgent, run_trial
from .toolkits import load_toolkit
from .trajectory import PersonaKind, TaskSample, Trajectory, load_trajectory, save_trajectory, tool_names, trajectory_path

logger = logging.getLogger(__name__)

EMPTY_TRAJECTORY_EXPLANATION = (
    "The conversation has no turns, so the agent trajectory is blank and the subgoal is not met. GRADE: I"
)


class ArtifactConflictError(RuntimeError):
    pass


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


def write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def cached(path: Path, key: str) -> Any | None:
    """The stored artifact if its key matches, None if absent; conflict otherwise."""
    if not path.exists():
        return None
    data = read_json(path)
    if data.get("key") != key:
        raise ArtifactConflictError(
            f"{path} was produced with different inputs; use a new --run-id instead of overwriting it"
        )
    return data


@dataclass
class Failure:
    stage: str
    sample_id: str
    persona: str
    trial_index: int | None
    error: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "sample_id": self.sample_id,
            "persona": self.persona,
            "trial_index": self.trial_index,
            "error": self.error,
        }


@dataclass
class RunState:
    config: RunConfig
    samples: list[TaskSample]
    trajectories: dict[tuple[str, str], dict[int, Trajectory]] = field(default_factory=dict)
    outcomes: dict[tuple[str, str], dict[int, TrialOutcome]] = field(default_factory=dict)
    failures: list[Failure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def make_gateway(cfg: RunConfig) -> Provider:
    live = cfg.live
    return make_provider(
        cfg.provider,
        base_url=live.base_url,
        api_key_env=live.api_key_env,
        max_attempts=live.max_attempts,
        backoff_base=live.backoff_base,
        timeout=live.timeout,
        rng=random.Random(cfg.seed),
    )


def n_trials_for(cfg: RunConfig, sample: TaskSample) -> int:
    return cfg.n_trials or sample.n_trials


def max_turns_for(cfg: RunConfig, sample: TaskSample) -> int:
    return cfg.max_turns or sample.max_turns


def k_values(cfg: RunConfig, samples: list[TaskSample]) -> tuple[int, ...]:
    if cfg.k:
        return tuple(cfg.k)
    return (min(n_trials_for(cfg, s) for s in samples),)


def prepare(cfg: RunConfig) -> RunState:
    """Validate config and dataset together; nothing touches a model before this passes."""
    cfg.validate()
    samples = load_dataset(cfg.dataset)
    if not samples:
        raise ValueError(f"dataset {cfg.dataset} is empty")
    ks = k_values(cfg, samples)
    too_few = [s.id for s in samples if max(ks) > n_trials_for(cfg, s)]
    if too_few:
        raise ConfigError(f"k={max(ks)} exceeds n_trials for samples {too_few}")
    return RunState(cfg, samples)


def agent_factory(cfg: RunConfig, gateway: Provider) -> Callable[[TaskSample, int], AgentConnector]:
    spec = cfg.agent
    if spec.type == "scripted":
        scripts = read_json(Path(spec.script))

        def scripted(sample: TaskSample, trial_index: int) -> AgentConnector:
            per_sample = scripts[sample.id]
            # either one script for every trial or {"<trial>": script}
            script = per_sample.get(str(trial_index), per_sample.get("*")) if isinstance(per_sample, dict) else per_sample
            return ScriptedAgent.from_json(script)

        return scripted

    toolkit = load_toolkit(spec.toolkit) if spec.toolkit else None
    system_prompt = cfg.agent_system_prompt()

    def reference(sample: TaskSample, trial_index: int) -> AgentConnector:
        registry, schemas = toolkit() if toolkit else ({}, [])
        return ReferenceAgent(
            gateway,
            spec.model,
            registry,
            schemas,
            system_prompt=system_prompt,
            temperature=spec.temperature,
            tool_budget=spec.tool_budget,
        )

    return reference


def talk_key(cfg: RunConfig, sample: TaskSample, persona: str, trial_index: int) -> str:
    return digest(
        {
            "sample": sample.to_dict(),
            "persona": persona,
            "persona_text": prompts.PERSONAS[PersonaKind(persona)].system_text,
            "reflection": prompts.REFLECTION_TEMPLATE,
            "response": prompts.RESPONSE_TEMPLATE,
            "agent": cfg.to_dict()["agent"],
            "agent_system_prompt": cfg.agent_system_prompt(),
            "user_model": cfg.user_model,
            "user_temperature": cfg.user_temperature,
            "termination_token": cfg.termination_token,
            "max_turns": max_turns_for(cfg, sample),
            "trial_index": trial_index,
        }
    )


def talk_stage(state: RunState, gateway: Provider) -> None:
    cfg = state.config
    make_agent = agent_factory(cfg, gateway)
    jobs = []
    for sample in state.samples:
        for persona in cfg.personas:
            bucket = state.trajectories.setdefault((sample.id, persona), {})
            for trial_index in range(1, n_trials_for(cfg, sample) + 1):
                path = trajectory_path(Path(cfg.out), cfg.run_id, sample.id, persona, trial_index)
                meta_path = path.with_name(f"trial_{trial_index}.meta.json")
                key = talk_key(cfg, sample, persona, trial_index)
                meta = cached(meta_path, key)
                if meta is not None and path.exists():
                    bucket[trial_index] = load_trajectory(path)
                    continue
                jobs.append((sample, persona, trial_index, path, meta_path, key))

    def one(job: tuple) -> tuple:
        sample, persona, trial_index, path, meta_path, key = job
        trajectory = run_trial(
            gateway,
            sample,
            prompts.PERSONAS[PersonaKind(persona)],
            make_agent(sample, trial_index),
            trial_index,
            agent_desc=cfg.agent.agent_desc,
            termination_token=cfg.termination_token,
            user_model=cfg.user_model,
            temperature=cfg.user_temperature,
            max_turns=max_turns_for(cfg, sample),
        )
        save_trajectory(trajectory, path)
        write_json(meta_path, {"key": key, "stage": "talk"})
        return job, trajectory

    _fan_out(state, "talk", jobs, one, lambda job, traj: state.trajectories[(job[0].id, job[1])].__setitem__(job[2], traj))


def _fan_out(state: RunState, stage: str, jobs: list, fn: Callable, on_done: Callable) -> None:
    def guarded(job: tuple) -> tuple:
        try:
            return fn(job)
        except Exception as exc:
            logger.error("%s failed for %s/%s trial %s: %r", stage, job[0].id, job[1], job[2], exc)
            return job, exc

    workers = max(1, state.config.workers)
    if workers == 1:
        results = [guarded(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, jobs))
    for job, result in results:
        if isinstance(result, Exception):
            state.failures.append(Failure(stage, job[0].id, job[1], job[2], f"{type(result).__name__}: {result}"))
        else:
            on_done(job, result)


def load_trajectories(state: RunState) -> None:
    """Pick up persisted trajectories for stage commands run on their own."""
    cfg = state.config
    for sample in state.samples:
        for persona in cfg.personas:
            bucket = state.trajectories.setdefault((sample.id, persona), {})
            for trial_index in range(1, n_trials_for(cfg, sample) + 1):
                path = trajectory_path(Path(cfg.out), cfg.run_id, sample.id, persona, trial_index)
                if path.exists() and trial_index not in bucket:
                    bucket[trial_index] = load_trajectory(path)


def judge_key(cfg: RunConfig, sample: TaskSample, trajectory: Trajectory) -> str:
    return digest(
        {
            "sample": sample.to_dict(),
            "trajectory": trajectory.content_dict(),
            "template": prompts.JUDGE_TEMPLATE,
            "model": cfg.judge_model,
            "temperature": cfg.judge_temperature,
            "q": cfg.q,
            "curve_mode": cfg.curve_mode,
            "t_max": max_turns_for(cfg, sample),
        }
    )


def judge_trial(judge: Judge, sample: TaskSample, trajectory: Trajectory, t_max: int) -> tuple[list[SubgoalAssessment], ProgressCurve]:
    n_turns = len(trajectory.turns)
    if n_turns == 0:
        verdicts = tuple(SubgoalVerdict(Grade.INCOMPLETE, EMPTY_TRAJECTORY_EXPLANATION, q) for q in range(1, judge.q + 1))
        assessments = [SubgoalAssessment(n.id, verdicts) for n in sample.grading_notes]
        curve = curve_from_achieved(sample.id, trajectory.trial_index, {n.id: None for n in sample.grading_notes}, t_max, 0)
        return assessments, curve
    cache: dict[tuple[str, int], SubgoalAssessment] = {}
    curve = judge.progress_curve(sample, trajectory, t_max=t_max, cache=cache)
    assessments = []
    for note in sample.grading_notes:
        key = (note.id, n_turns)
        if key not in cache:
            cache[key] = judge.assess_subgoal(sample, note, trajectory)
        assessments.append(cache[key])
    return assessments, curve


def judge_stage(state: RunState, gateway: Provider) -> None:
    cfg = state.config
    judge = Judge(gateway, model=cfg.judge_model, temperature=cfg.judge_temperature, q=cfg.q, curve_mode=cfg.curve_mode)
    by_id = {s.id: s for s in state.samples}
    jobs = []
    for (sample_id, persona), trials in state.trajectories.items():
        sample = by_id[sample_id]
        bucket = state.outcomes.setdefault((sample_id, persona), {})
        for trial_index, trajectory in sorted(trials.items()):
            path = trajectory_path(Path(cfg.out), cfg.run_id, sample_id, persona, trial_index).with_name(f"judge_{trial_index}.json")
            key = judge_key(cfg, sample, trajectory)
            stored = cached(path, key)
            if stored is not None:
                bucket[trial_index] = outcome_from_json(stored)
                continue
            jobs.append((sample, persona, trial_index, trajectory, path, key))

    def one(job: tuple) -> tuple:
        sample, persona, trial_index, trajectory, path, key = job
        assessments, curve = judge_trial(judge, sample, trajectory, max_turns_for(cfg, sample))
        outcome = TrialOutcome(sample.id, trial_index, curve.terminal, curve, tuple(assessments))
        write_json(path, outcome_to_json(outcome, key, persona, trajectory))
        return job, outcome

    _fan_out(state, "judge", jobs, one, lambda job, o: state.outcomes[(job[0].id, job[1])].__setitem__(job[2], o))


def outcome_to_json(outcome: TrialOutcome, key: str, persona: str, trajectory: Trajectory) -> dict[str, Any]:
    expectation, variance = trial_moments([a.z for a in outcome.assessments])
    notes = []
    for a in outcome.assessments:
        d = a.to_dict()
        d["achieved_turn"] = outcome.curve.achieved_turn.get(a.grading_note_id)
        notes.append(d)
    return {
        "key": key,
        "sample_id": outcome.sample_id,
        "persona": persona,
        "trial_index": outcome.trial_index,
        "termination": trajectory.termination.value,
        "n_turns": len(trajectory.turns),
        "final_progress": outcome.final_progress,
        "expectation": expectation,
        "variance": variance,
        "notes": notes,
        "curve": outcome.curve.to_dict(),
    }


def outcome_from_json(data: dict[str, Any]) -> TrialOutcome:
    return TrialOutcome(
        sample_id=data["sample_id"],
        trial_index=data["trial_index"],
        final_progress=data["final_progress"],
        curve=ProgressCurve.from_dict(data["curve"]),
        assessments=tuple(SubgoalAssessment.from_dict(n) for n in data["notes"]),
    )


def load_outcomes(state: RunState) -> None:
    cfg = state.config
    for sample in state.samples:
        for persona in cfg.personas:
            bucket = state.outcomes.setdefault((sample.id, persona), {})
            for trial_index in range(1, n_trials_for(cfg, sample) + 1):
                path = trajectory_path(Path(cfg.out), cfg.run_id, sample.id, persona, trial_index).with_name(f"judge_{trial_index}.json")
                if path.exists() and trial_index not in bucket:
                    bucket[trial_index] = outcome_from_json(read_json(path))


def diagnose_key(cfg: RunConfig, judge_keys: list[str], tools: list[str]) -> str:
    return digest(
        {
            "judge_keys": judge_keys,
            "model": cfg.diagnose_model,
            "temperature": cfg.diagnose_temperature,
            "templates": [prompts.IDENTIFY_TEMPLATE, prompts.SELECTIVE_TEMPLATE, prompts.CLUSTER_TEMPLATE],
            "tools": tools,
        }
    )


def _diagnose_group(
    diagnoser: Diagnoser, groups: list[tuple[TaskSample, dict[int, TrialOutcome]]]
) -> dict[str, Any]:
    candidates: list[ErrorCandidate] = []
    for sample, outcomes in groups:
        candidates += build_candidates(sample.id, {t: o.assessments for t, o in outcomes.items()}, sample.grading_notes)
    errors: list[LowLevelError] = diagnoser.identify_errors(candidates)
    clusters: list[ErrorCluster] = []
    if any(e.identified for e in errors):
        notes = [n for sample, _ in groups for n in sample.grading_notes]
        # only subgoals that produced candidates feed the clustering prompt
        candidate_notes = {c.grading_note.text for c in candidates}
        clusters = diagnoser.cluster_errors(errors, [n for n in notes if n.text in candidate_notes])
    return {
        "candidates": [c.to_dict() for c in candidates],
        "low_level_errors": [e.to_dict() for e in errors],
        "clusters": [c.to_dict() for c in clusters],
    }


def diagnose_stage(state: RunState, gateway: Provider) -> None:
    cfg = state.config
    by_id = {s.id: s for s in state.samples}
    for persona in cfg.personas:
        units: list[tuple[str, list[tuple[TaskSample, dict[int, TrialOutcome]]], Path]] = []
        if cfg.cluster_scope == "dataset":
            groups = [(by_id[sid], state.outcomes.get((sid, persona), {})) for sid in sorted(by_id)]
            units.append(("*", groups, cfg.run_dir / f"diagnosis_{persona}.json"))
        else:
            for sample in state.samples:
                path = cfg.run_dir / sample.id / persona / "diagnosis.json"
                units.append((sample.id, [(sample, state.outcomes.get((sample.id, persona), {}))], path))

        for label, groups, path in units:
            for sample, outcomes in groups:
                write_scatter(cfg.run_dir / sample.id / persona / "scatter.csv", outcomes)
            judge_keys = []
            for sample, outcomes in groups:
                for t in sorted(outcomes):
                    jp = cfg.run_dir / sample.id / persona / f"judge_{t}.json"
                    judge_keys.append(read_json(jp)["key"] if jp.exists() else f"{sample.id}:{t}")
            trajs = [tr for sample, _ in groups for tr in state.trajectories.get((sample.id, persona), {}).values()]
            tools = sorted(tool_names(trajs))
            key = diagnose_key(cfg, judge_keys, tools)
            if cached(path, key) is not None:
                continue
            if not any(outcomes for _, outcomes in groups):
                continue
            diagnoser = Diagnoser(
                gateway,
                model=cfg.diagnose_model,
                temperature=cfg.diagnose_temperature,
                tool_names=frozenset(tools),
            )
            try:
                result = _diagnose_group(diagnoser, groups)
            except Exception as exc:
                logger.error("diagnose failed for %s/%s: %r", label, persona, exc)
                state.failures.append(Failure("diagnose", label, persona, None, f"{type(exc).__name__}: {exc}"))
                continue
            write_json(path, {"key": key, "scope": cfg.cluster_scope, "persona": persona, **result})


def write_scatter(path: Path, outcomes: dict[int, TrialOutcome]) -> None:
    rows = scatter_data({t: o.assessments for t, o in outcomes.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial_index", "expectation", "variance"])
        for trial_index, expectation, variance in rows:
            writer.writerow([trial_index, repr(expectation), repr(variance)])


def run_has_artifacts(cfg: RunConfig) -> bool:
    return cfg.run_dir.exists() and any(cfg.run_dir.rglob("trial_*.json"))


def close_gateway(gateway: Provider) -> None:
    gateway.close()
    if isinstance(gateway, RecordingProvider):
        gateway.inner.close()


def run_eval(cfg: RunConfig, gateway: Provider | None = None, stages: tuple[str, ...] = ("talk", "judge", "diagnose")) -> RunState:
    """Run the requested stages; each stage's artifacts are persisted before the next starts."""
    state = prepare(cfg)
    own_gateway = gateway is None
    gateway = gateway or make_gateway(cfg)
    try:
        if not (cfg.run_dir / "config.json").exists():
            write_json(cfg.run_dir / "config.json", {"config": cfg.to_dict()})
        if "talk" in stages:
            talk_stage(state, gateway)
        else:
            load_trajectories(state)
        if "judge" in stages:
            judge_stage(state, gateway)
        else:
            load_outcomes(state)
        if "diagnose" in stages:
            diagnose_stage(state, gateway)
    finally:
        if own_gateway:
            close_gateway(gateway)
    if isinstance(gateway, LiveProvider):
        logger.info("live provider made %d network calls", gateway.network_calls)
    return state
