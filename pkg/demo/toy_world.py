"""Rule-based stand-ins for every model role, used to record the demo cassette.

The fake user proxy, agent model, judge and diagnoser read the prompts they
receive and answer deterministically, so a recorded run replays exactly.
"""

from __future__ import annotations

import json
import re
from collections import Counter

from ted.gateway import ChatRequest, ChatResult, FunctionProvider, ToolCall

WIFI_PLAN = [("set_low_battery_mode_status", {"on": False}), ("set_wifi_status", {"on": True})]
LOCATION_PLAN = [("set_location_service_status", {"on": True}), ("get_current_location", {})]

# (sample marker in the instruction, expert opener, non-expert utterances)
USER_SCRIPTS = {
    "which city": (
        "Please turn off low battery mode, turn on wifi and tell me which city I am in.",
        ["my phone wont connect, can u turn the wifi on", "ok and where am i right now?"],
    ),
    "final device settings": (
        "Turn on wifi and confirm my final device settings.",
        ["wifi pls", "is everything set?"],
    ),
}
STOP_REPLY = "Thanks, that is all I needed. ###STOP###"

_TOOL_RE = re.compile(r"\b[a-z]+(?:_[a-z]+)+\b")


def _section(text: str, start: str, end: str = "\n\n*") -> str:
    i = text.find(start)
    if i == -1:
        return ""
    i += len(start)
    j = text.find(end, i)
    return text[i : j if j != -1 else len(text)]


def _user(request: ChatRequest) -> str:
    system, prompt = request.messages[0].content, request.messages[-1].content
    if request.request_tag == "user_reflect":
        return "The user should keep following the task summary and check the assistant's last reply."
    expert = system.startswith("You are acting as an expert")
    history = _section(prompt, "[Chat History]\n", "\n---")
    said = history.count("USER:")
    for marker, (opener, steps) in USER_SCRIPTS.items():
        if marker in system:
            script = [opener] if expert else steps
            return script[said] if said < len(script) else STOP_REPLY
    return STOP_REPLY


def _agent(request: ChatRequest) -> ChatResult:
    last_user = max(i for i, m in enumerate(request.messages) if m.role == "user")
    utterance = request.messages[last_user].content.lower()
    done = [m for m in request.messages[last_user + 1 :] if m.role == "tool"]
    plan = []
    if "wifi" in utterance:
        plan += WIFI_PLAN
    if "city" in utterance or "where am i" in utterance:
        plan += LOCATION_PLAN
    if len(done) < len(plan):
        name, args = plan[len(done)]
        return ChatResult(tool_calls=(ToolCall(name, json.dumps(args), f"call_{last_user}_{len(done)}"),))
    if not done:
        return ChatResult("Everything is set: wifi is on and low battery mode is off.")
    return ChatResult("Done: " + "; ".join(m.content for m in done) + ".")


class _Judge:
    """Tool-presence grading, with one deliberately flaky note to create disagreement."""

    def __init__(self) -> None:
        self.seen: Counter[str] = Counter()

    def __call__(self, request: ChatRequest) -> str:
        prompt = request.messages[-1].content
        occurrence = self.seen[prompt]
        self.seen[prompt] += 1
        note = _section(prompt, "[Ground Truth Subgoal]:\n")
        trajectory = _section(prompt, "[Agent Intermediate Trajectories]:\n")
        responses = _section(prompt, "[Agent Responses Submission]:\n")
        if "confirm" in note:
            ok = occurrence % 5 in (1, 3)
            why = "The agent's confirmation is ambiguous."
        elif "inform the user" in note:
            ok = "Cupertino" in responses
            why = "The agent reported the city." if ok else "The agent never told the user the city."
        else:
            tools = _TOOL_RE.findall(note)
            ok = bool(tools) and all(f"tool_call: {t}(" in trajectory for t in tools)
            why = f"{', '.join(tools)} was {'called' if ok else 'never called'} in the trajectory."
        return f"{why}\nGRADE: {'C' if ok else 'I'}"


def _diagnose(request: ChatRequest) -> str:
    prompt = request.messages[0].content
    if request.request_tag == "diagnose_identify":
        subgoal = _section(prompt, "[Ground Truth Subgoals]: ", "\n")
        tools = _TOOL_RE.findall(subgoal)
        label = f"Missing {tools[0]} call" if tools else "Final settings not confirmed to the user"
        return json.dumps({"error_type": label, "explanation": _section(prompt, "[Explanation]: ", "\n***")})
    if request.request_tag == "diagnose_select":
        types = json.loads(_section(prompt, "[Error Types]: ", "\n"))
        return json.dumps({"most_probable_error_type": Counter(types).most_common(1)[0][0]})
    errors = json.loads(_section(prompt, "[Error Types]: ", "\n***"))
    groups: dict[str, list[str]] = {}
    for e in errors:
        groups.setdefault(e["error_type"], []).append(e["error_id"])
    clusters = [{"cluster_label": t, "error_types": [t], "error_ids": ids} for t, ids in groups.items()]
    return json.dumps({"clusters": clusters})


def toy_provider() -> FunctionProvider:
    judge = _Judge()

    def respond(request: ChatRequest):
        tag = request.request_tag
        if tag.startswith("user_"):
            return _user(request)
        if tag == "agent":
            return _agent(request)
        if tag == "judge":
            return judge(request)
        if tag.startswith("diagnose_"):
            return _diagnose(request)
        raise ValueError(f"toy world has no responder for tag {tag!r}")

    return FunctionProvider(respond)
