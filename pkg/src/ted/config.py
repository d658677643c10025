"""Run configuration: one declarative YAML/JSON file, ``${VAR}`` interpolated from the environment."""

from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .judge import DEFAULT_JUDGE_TEMPERATURE, DEFAULT_Q
from .metrics import AUC_TURNS, AUC_ZERO
from .talk import DEFAULT_TERMINATION_TOKEN
from .trajectory import PersonaKind


class ConfigError(ValueError):
    pass


_VAR_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value: Any) -> Any:
    if isinstance(value, str):

        def sub(m: re.Match[str]) -> str:
            name, default = m.group(1), m.group(2)
            if name in os.environ:
                return os.environ[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is not set")

        return _VAR_RE.sub(sub, value)
    if isinstance(value, list):
        return [interpolate(v) for v in value]
    if isinstance(value, dict):
        return {k: interpolate(v) for k, v in value.items()}
    return value


@dataclass(frozen=True)
class AgentSpec:
    type: str = "reference"  # reference | scripted
    model: str = "gpt-4.1"
    system_prompt: str = ""
    system_prompt_file: str = ""
    agent_desc: str = ""
    toolkit: str = ""
    temperature: float = 0.0
    tool_budget: int = 10
    script: str = ""  # scripted: JSON {sample_id: [[event, ...], ...]}

    @property
    def label(self) -> str:
        return self.model if self.type == "reference" else f"scripted:{Path(self.script).name}"


@dataclass(frozen=True)
class LiveSpec:
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    max_attempts: int = 5
    backoff_base: float = 1.0
    timeout: float = 120.0


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    personas: tuple[str, ...] = ("expert", "non_expert")
    agent: AgentSpec = field(default_factory=AgentSpec)
    user_model: str = "gpt-4.1"
    judge_model: str = "gpt-4.1"
    diagnose_model: str = "gpt-4.1"
    user_temperature: float = 0.7
    judge_temperature: float = DEFAULT_JUDGE_TEMPERATURE
    diagnose_temperature: float = 0.0
    n_trials: int | None = None
    max_turns: int | None = None
    q: int = DEFAULT_Q
    threshold: float = 1.0
    k: tuple[int, ...] = ()
    auc_convention: str = AUC_TURNS
    curve_mode: str = "bisect"
    termination_token: str = DEFAULT_TERMINATION_TOKEN
    cluster_scope: str = "sample"  # sample | dataset
    provider: str = "live"
    live: LiveSpec = field(default_factory=LiveSpec)
    out: str = "ted_out"
    run_id: str = "default"
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        problems = []
        if self.q < 1 or self.q % 2 == 0:
            problems.append(f"q must be a positive odd integer, got {self.q}")
        for p in self.personas:
            if p not in {k.value for k in PersonaKind}:
                problems.append(f"unknown persona {p!r}")
        if not 0.0 <= self.threshold <= 1.0:
            problems.append(f"threshold must lie in [0, 1], got {self.threshold}")
        if any(k < 1 for k in self.k):
            problems.append(f"k values must be >= 1, got {list(self.k)}")
        if self.n_trials is not None and self.n_trials < 1:
            problems.append("n_trials must be >= 1")
        if self.n_trials is not None and self.k and max(self.k) > self.n_trials:
            problems.append(f"k={max(self.k)} exceeds n_trials={self.n_trials}")
        if self.max_turns is not None and self.max_turns < 1:
            problems.append("max_turns must be >= 1")
        if self.auc_convention not in (AUC_TURNS, AUC_ZERO):
            problems.append(f"auc_convention must be {AUC_TURNS!r} or {AUC_ZERO!r}")
        if self.curve_mode not in ("bisect", "exhaustive"):
            problems.append("curve_mode must be 'bisect' or 'exhaustive'")
        if self.cluster_scope not in ("sample", "dataset"):
            problems.append("cluster_scope must be 'sample' or 'dataset'")
        if self.agent.type not in ("reference", "scripted"):
            problems.append(f"unknown agent type {self.agent.type!r}")
        if self.agent.type == "scripted" and not self.agent.script:
            problems.append("scripted agent needs agent.script")
        if not self.termination_token:
            problems.append("termination_token must be non-empty")
        if problems:
            raise ConfigError("invalid run config:\n  - " + "\n  - ".join(problems))

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / "runs" / self.run_id

    def agent_system_prompt(self) -> str:
        if self.agent.system_prompt_file:
            return Path(self.agent.system_prompt_file).read_text(encoding="utf-8")
        return self.agent.system_prompt

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        clean = {k: v for k, v in overrides.items() if v is not None and v != ()}
        return replace(self, **clean)


def _build(cls: type, data: dict[str, Any]) -> Any:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    data = dict(interpolate(data or {}))
    if "agent" in data:
        data["agent"] = _build(AgentSpec, data["agent"] or {})
    if "live" in data:
        data["live"] = _build(LiveSpec, data["live"] or {})
    for key in ("personas", "k"):
        if key in data:
            value = data[key]
            data[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
    cfg = _build(RunConfig, data)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, base_dir)
    return cfg


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def rel(p: str) -> str:
        return str(base / p) if p and not os.path.isabs(p) else p

    agent = replace(cfg.agent, system_prompt_file=rel(cfg.agent.system_prompt_file), script=rel(cfg.agent.script))
    kind, sep, arg = cfg.provider.partition(":")
    provider = f"{kind}:{rel(arg)}" if sep else cfg.provider
    return replace(cfg, dataset=rel(cfg.dataset), agent=agent, provider=provider)


def load_config(path: str | Path) -> RunConfig:
    """Load a config file; relative paths inside it resolve against the file's directory."""
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data or {}, base_dir=path.parent)
