"""The talking stage: persona-templated user proxy driving an agent under test."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Mapping, Protocol, Sequence, Union

from .gateway import ChatMessage, ChatRequest, Provider
from .prompts import REFLECTION_TEMPLATE, RESPONSE_TEMPLATE, MissingPlaceholderError, fill
from .trajectory import (
    AgentEvent,
    AgentMessage,
    PersonaTemplate,
    TaskSample,
    Termination,
    ToolInvocation,
    Trajectory,
    TrialSet,
    Turn,
)

logger = logging.getLogger(__name__)

DEFAULT_TERMINATION_TOKEN = "###STOP###"
EMPTY_HISTORY = "(no messages yet: you are starting the conversation)"
BUDGET_EXCEEDED_MESSAGE = (
    "I'm sorry, I was unable to finish handling this request within the allowed number of tool calls."
)


@dataclass(frozen=True)
class UserProxyConfig:
    persona: PersonaTemplate
    instruction: str
    agent_desc: str = ""
    termination_token: str = DEFAULT_TERMINATION_TOKEN
    user_model: str = "gpt-4.1"
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if not self.termination_token:
            raise ValueError("termination_token must be non-empty")

    @property
    def system_prompt(self) -> str:
        return build_user_prompt(self.persona, self.instruction, self.agent_desc)


def build_user_prompt(persona: PersonaTemplate, instruction: str, agent_desc: str) -> str:
    text = persona.system_text
    for token in ("{user_task_summary}", "{agent_desc}"):
        count = text.count(token)
        if count != 1:
            raise MissingPlaceholderError(f"persona template must contain {token} exactly once (found {count})")
    # fill agent_desc first so a task text containing "{agent_desc}" is left alone
    return fill(fill(text, agent_desc=agent_desc), user_task_summary=instruction)


def format_chat_history(dialogue: Sequence[tuple[str, str]]) -> str:
    if not dialogue:
        return EMPTY_HISTORY
    names = {"user": "USER", "assistant": "AI ASSISTANT"}
    return "\n".join(f"{names[role]}: {text}" for role, text in dialogue)


def format_reflections(reflections: Sequence[str]) -> str:
    return "\n".join(f"Reflection {i}: {r}" for i, r in enumerate(reflections, start=1))


def signals_termination(reflection: str, token: str) -> bool:
    """True when a reflection says the conversation is over."""
    lowered = reflection.lower()
    return token in reflection or "terminat" in lowered or "end the conversation" in lowered


def user_reflect(gateway: Provider, config: UserProxyConfig, chat_history: str) -> str:
    prompt = fill(
        REFLECTION_TEMPLATE,
        chat_history=chat_history or EMPTY_HISTORY,
        termination_msg=config.termination_token,
    )
    request = ChatRequest(
        model=config.user_model,
        messages=(ChatMessage("system", config.system_prompt), ChatMessage("user", prompt)),
        temperature=config.temperature,
        request_tag="user_reflect",
    )
    return gateway.complete(request).content


@dataclass(frozen=True)
class UserReply:
    text: str
    terminate: bool


def user_respond(gateway: Provider, config: UserProxyConfig, chat_history: str, reflection: str) -> UserReply:
    prompt = fill(
        RESPONSE_TEMPLATE,
        chat_history=chat_history or EMPTY_HISTORY,
        reflection_history=reflection,
        termination_msg=config.termination_token,
    )
    request = ChatRequest(
        model=config.user_model,
        messages=(ChatMessage("system", config.system_prompt), ChatMessage("user", prompt)),
        temperature=config.temperature,
        request_tag="user_respond",
    )
    text = gateway.complete(request).content
    return UserReply(text=text, terminate=config.termination_token in text)


class AgentConnector(Protocol):
    def step(self, history: Sequence[ChatMessage]) -> Sequence[AgentEvent]: ...


AgentSource = Union[AgentConnector, Callable[[int], AgentConnector]]


def agent_history(turns: Sequence[Turn], next_utterance: str | None = None) -> list[ChatMessage]:
    """What the agent sees: user utterances and its own events, never reflections."""
    messages: list[ChatMessage] = []
    for turn in turns:
        messages.append(ChatMessage("user", turn.user_utterance))
        messages.extend(_events_to_messages(turn.agent_events))
    if next_utterance is not None:
        messages.append(ChatMessage("user", next_utterance))
    return messages


def _events_to_messages(events: Sequence[AgentEvent]) -> list[ChatMessage]:
    messages = []
    for event in events:
        if isinstance(event, ToolInvocation):
            call = {"id": event.call_id, "name": event.name, "arguments": event.arguments}
            messages.append(ChatMessage("assistant", "", {"tool_calls": [call]}))
            messages.append(ChatMessage("tool", event.result, {"tool_call_id": event.call_id, "name": event.name}))
        else:
            messages.append(ChatMessage("assistant", event.text))
    return messages


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_trial(
    gateway: Provider,
    sample: TaskSample,
    persona: PersonaTemplate,
    agent: AgentConnector,
    trial_index: int,
    *,
    agent_desc: str = "",
    termination_token: str = DEFAULT_TERMINATION_TOKEN,
    user_model: str = "gpt-4.1",
    temperature: float = 0.7,
    max_turns: int | None = None,
) -> Trajectory:
    """Run one conversation. The user proxy always speaks first.

    Gateway errors raised by the user proxy propagate; a failing agent ends the
    trial with ``Termination.AGENT_ERROR`` and keeps what happened so far.
    """
    config = UserProxyConfig(
        persona=persona,
        instruction=sample.instruction,
        agent_desc=agent_desc,
        termination_token=termination_token,
        user_model=user_model,
        temperature=temperature,
    )
    limit = max_turns if max_turns is not None else sample.max_turns
    started = _now()
    turns: list[Turn] = []
    dialogue: list[tuple[str, str]] = []
    reflections: list[str] = []
    final_message = final_reflection = error = ""

    while True:
        if len(turns) >= limit:
            termination = Termination.MAX_TURNS_REACHED
            break
        history = format_chat_history(dialogue)
        reflection = user_reflect(gateway, config, history)
        reflections.append(reflection)
        if signals_termination(reflection, termination_token):
            logger.debug("trial %d: reflection signals termination", trial_index)
        reply = user_respond(gateway, config, history, format_reflections(reflections))
        if reply.terminate:
            termination = Termination.USER_TERMINATED
            final_message, final_reflection = reply.text, reflection
            break
        index = len(turns) + 1
        try:
            events = tuple(agent.step(agent_history(turns, reply.text)))
        except Exception as exc:  # the agent under test is untrusted
            logger.warning("trial %d turn %d: agent failed: %r", trial_index, index, exc)
            turns.append(Turn(index, reply.text, reflection, ()))
            termination = Termination.AGENT_ERROR
            error = f"{type(exc).__name__}: {exc}"
            break
        turns.append(Turn(index, reply.text, reflection, events))
        dialogue.append(("user", reply.text))
        dialogue.extend(("assistant", e.text) for e in events if isinstance(e, AgentMessage))

    return Trajectory(
        sample_id=sample.id,
        persona_kind=persona.kind,
        trial_index=trial_index,
        turns=tuple(turns),
        termination=termination,
        started_at=started,
        finished_at=_now(),
        final_user_message=final_message,
        final_reflection=final_reflection,
        error=error,
    )


def run_trials(
    gateway: Provider,
    sample: TaskSample,
    persona: PersonaTemplate,
    agent: AgentSource,
    n: int,
    *,
    workers: int = 1,
    **trial_options: Any,
) -> TrialSet:
    """Run ``n`` independent trials (indices 1..n).

    ``agent`` is either a connector or a factory ``trial_index -> connector``;
    pass a factory whenever the connector holds per-conversation state.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    def one(index: int) -> Trajectory:
        connector = agent(index) if not hasattr(agent, "step") else agent
        return run_trial(gateway, sample, persona, connector, index, **trial_options)

    results: dict[int, Trajectory] = {}
    failures: dict[int, str] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {i: pool.submit(one, i) for i in range(1, n + 1)}
        for index, future in futures.items():
            try:
                results[index] = future.result()
            except Exception as exc:
                logger.error("trial %d of %s/%s failed: %r", index, sample.id, persona.kind.value, exc)
                failures[index] = f"{type(exc).__name__}: {exc}"
    return TrialSet(
        sample_id=sample.id,
        persona_kind=persona.kind,
        trajectories=tuple(results[i] for i in sorted(results)),
        failures=failures,
    )


ToolRegistry = Mapping[str, Callable[..., Any]]


def execute_tool(registry: ToolRegistry, name: str, arguments: str) -> str:
    fn = registry.get(name)
    if fn is None:
        return f"ERROR: unknown tool {name!r}"
    try:
        kwargs = json.loads(arguments) if arguments.strip() else {}
        if not isinstance(kwargs, dict):
            return f"ERROR: arguments for {name!r} must be a JSON object"
        result = fn(**kwargs)
    except Exception as exc:
        return f"ERROR: {type(exc).__name__}: {exc}"
    return result if isinstance(result, str) else json.dumps(result, sort_keys=True)


def reference_agent_step(
    gateway: Provider,
    history: Sequence[ChatMessage],
    registry: ToolRegistry,
    *,
    model: str,
    system_prompt: str = "",
    tool_schemas: Sequence[dict[str, Any]] = (),
    temperature: float = 0.0,
    tool_budget: int = 10,
) -> list[AgentEvent]:
    """A minimal tool-calling agent loop, used to self-test the harness."""
    messages = list(history)
    if system_prompt:
        messages.insert(0, ChatMessage("system", system_prompt))
    events: list[AgentEvent] = []
    used = 0
    while True:
        result = gateway.complete(
            ChatRequest(
                model=model,
                messages=tuple(messages),
                tools=tuple(tool_schemas) or None,
                temperature=temperature,
                request_tag="agent",
            )
        )
        if not result.tool_calls:
            events.append(AgentMessage(result.content))
            return events
        calls = []
        for call in result.tool_calls:
            calls.append({"id": call.id or f"call_{used + len(calls) + 1}", "name": call.name, "arguments": call.arguments})
        messages.append(ChatMessage("assistant", result.content, {"tool_calls": calls}))
        for call in calls:
            if used >= tool_budget:
                events.append(AgentMessage(BUDGET_EXCEEDED_MESSAGE))
                return events
            output = execute_tool(registry, call["name"], call["arguments"])
            used += 1
            events.append(ToolInvocation(call["name"], call["arguments"], output, call["id"]))
            messages.append(ChatMessage("tool", output, {"tool_call_id": call["id"], "name": call["name"]}))


class ReferenceAgent:
    def __init__(
        self,
        gateway: Provider,
        model: str,
        registry: ToolRegistry | None = None,
        tool_schemas: Sequence[dict[str, Any]] = (),
        system_prompt: str = "",
        temperature: float = 0.0,
        tool_budget: int = 10,
    ):
        self.gateway = gateway
        self.model = model
        self.registry = registry or {}
        self.tool_schemas = tuple(tool_schemas)
        self.system_prompt = system_prompt
        self.temperature = temperature
        self.tool_budget = tool_budget

    def step(self, history: Sequence[ChatMessage]) -> list[AgentEvent]:
        return reference_agent_step(
            self.gateway,
            history,
            self.registry,
            model=self.model,
            system_prompt=self.system_prompt,
            tool_schemas=self.tool_schemas,
            temperature=self.temperature,
            tool_budget=self.tool_budget,
        )


class ScriptedAgent:
    """Replays a fixed list of per-turn event lists; raises when the script is exhausted."""

    def __init__(self, script: Sequence[Sequence[AgentEvent]]):
        self._script = [tuple(events) for events in script]
        self._next = 0

    @classmethod
    def from_json(cls, data: Sequence[Sequence[dict[str, Any]]]) -> "ScriptedAgent":
        script = []
        for turn in data:
            events: list[AgentEvent] = []
            for e in turn:
                if e["type"] == "tool_invocation":
                    events.append(ToolInvocation(e["name"], e.get("arguments", "{}"), e.get("result", ""), e.get("call_id", "")))
                else:
                    events.append(AgentMessage(e["text"]))
            script.append(events)
        return cls(script)

    def step(self, history: Sequence[ChatMessage]) -> tuple[AgentEvent, ...]:
        if self._next >= len(self._script):
            raise RuntimeError("scripted agent has no more turns")
        events = self._script[self._next]
        self._next += 1
        return events
