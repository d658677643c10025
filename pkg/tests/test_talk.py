import pytest

from conftest import AIRLINE_INSTRUCTION, make_sample
from ted.gateway import ChatResult, FunctionProvider, ScriptedProvider, ToolCall
from ted.prompts import EXPERT_PERSONA, MissingPlaceholderError, NON_EXPERT_PERSONA, PERSONAS
from ted.talk import (
    BUDGET_EXCEEDED_MESSAGE,
    EMPTY_HISTORY,
    ReferenceAgent,
    ScriptedAgent,
    UserProxyConfig,
    agent_history,
    build_user_prompt,
    execute_tool,
    format_chat_history,
    reference_agent_step,
    run_trial,
    run_trials,
    signals_termination,
    user_reflect,
    user_respond,
)
from ted.toolkits import phone_settings
from ted.trajectory import AgentMessage, PersonaKind, PersonaTemplate, Termination, ToolInvocation

AIRLINE_DESC = "An airline customer service agent that can look up, modify and cancel reservations."
EXPERT = PERSONAS[PersonaKind.EXPERT]
NON_EXPERT = PERSONAS[PersonaKind.NON_EXPERT]


def user_world(replies):
    """Gateway that answers reflections with a fixed line and responses from ``replies`` in order."""
    queue = list(replies)
    seen = []

    def respond(request):
        seen.append(request)
        if request.request_tag == "user_reflect":
            return "User should continue with the task."
        return queue.pop(0)

    return FunctionProvider(respond), seen


def chatty_agent(n=20):
    return ScriptedAgent([[AgentMessage(f"agent reply {i}")] for i in range(1, n + 1)])


# -- prompt construction


def test_expert_prompt_contains_texts_once():
    prompt = build_user_prompt(EXPERT, AIRLINE_INSTRUCTION, AIRLINE_DESC)
    assert prompt.startswith("You are acting as an expert LLM-simulated user")
    assert prompt.count(AIRLINE_INSTRUCTION) == 1
    assert prompt.count(AIRLINE_DESC) == 1
    assert "{user_task_summary}" not in prompt and "{agent_desc}" not in prompt


def test_empty_agent_desc_keeps_section():
    prompt = build_user_prompt(NON_EXPERT, AIRLINE_INSTRUCTION, "")
    template = NON_EXPERT.system_text
    before = template[: template.index("{agent_desc}")]
    assert before.replace("{user_task_summary}", AIRLINE_INSTRUCTION) in prompt


def test_personas_differ_only_in_template_text():
    a = build_user_prompt(EXPERT, AIRLINE_INSTRUCTION, AIRLINE_DESC)
    b = build_user_prompt(NON_EXPERT, AIRLINE_INSTRUCTION, AIRLINE_DESC)
    assert a != b
    def strip(prompt):
        return prompt.replace(AIRLINE_INSTRUCTION, "{user_task_summary}").replace(AIRLINE_DESC, "{agent_desc}")

    assert strip(a) == EXPERT_PERSONA
    assert strip(b) == NON_EXPERT_PERSONA


def test_instruction_with_brace_tokens_is_left_alone():
    tricky = "Say {agent_desc} literally."
    prompt = build_user_prompt(EXPERT, tricky, "DESC")
    assert tricky in prompt


@pytest.mark.parametrize("text", ["no placeholders", "{user_task_summary} {user_task_summary} {agent_desc}"])
def test_bad_persona_template(text):
    with pytest.raises(MissingPlaceholderError):
        build_user_prompt(PersonaTemplate(PersonaKind.EXPERT, text), "i", "d")


def test_config_requires_token():
    with pytest.raises(ValueError):
        UserProxyConfig(EXPERT, "i", termination_token="")


# -- reflect / respond


def test_user_reflect_returns_reply_and_marks_empty_history():
    provider = ScriptedProvider(["User should give the user id next."])
    config = UserProxyConfig(EXPERT, AIRLINE_INSTRUCTION)
    assert user_reflect(provider, config, "") == "User should give the user id next."
    assert provider.calls_by_tag == {"user_reflect": 1}


def test_reflect_prompt_contains_empty_history_marker():
    provider, seen = user_world([])
    user_reflect(provider, UserProxyConfig(EXPERT, "i"), format_chat_history([]))
    assert EMPTY_HISTORY in seen[0].messages[-1].content
    assert "###STOP###" in seen[0].messages[-1].content


@pytest.mark.parametrize(
    "reply,terminate",
    [
        ("Thanks! ###STOP###", True),
        ("My user id is sophia_martin_4574.", False),
        ("ok ###STOP### and also one more thing", True),
    ],
)
def test_user_respond_termination(reply, terminate):
    config = UserProxyConfig(EXPERT, AIRLINE_INSTRUCTION)
    result = user_respond(ScriptedProvider([reply]), config, "USER: hi", "Reflection 1: go")
    assert result.terminate is terminate
    assert result.text == reply


def test_reflection_termination_flag():
    assert signals_termination("All done, prepare to terminate.", "###STOP###")
    assert signals_termination("reply with ###STOP###", "###STOP###")
    assert not signals_termination("User should give the user id next.", "###STOP###")


# -- trial loop


def test_user_terminates_on_second_response():
    provider, _ = user_world(["Hi, please turn wifi on.", "Thanks! ###STOP###"])
    traj = run_trial(provider, make_sample(), EXPERT, chatty_agent(), 1)
    assert len(traj.turns) == 1
    assert traj.termination is Termination.USER_TERMINATED
    assert traj.turns[0].user_utterance == "Hi, please turn wifi on."
    assert traj.final_user_message == "Thanks! ###STOP###"
    assert provider.calls_by_tag == {"user_reflect": 2, "user_respond": 2}


@pytest.mark.parametrize("max_turns", [8, 15])
def test_max_turns_cap(max_turns):
    provider, _ = user_world([f"message {i}" for i in range(40)])
    traj = run_trial(provider, make_sample(max_turns=max_turns), NON_EXPERT, chatty_agent(), 1)
    assert len(traj.turns) == max_turns
    assert traj.termination is Termination.MAX_TURNS_REACHED
    assert [t.index for t in traj.turns] == list(range(1, max_turns + 1))


def test_agent_failure_is_recorded():
    class Broken:
        def step(self, history):
            raise RuntimeError("connector down")

    provider, _ = user_world(["hello"])
    traj = run_trial(provider, make_sample(), EXPERT, Broken(), 2)
    assert traj.termination is Termination.AGENT_ERROR
    assert len(traj.turns) == 1 and traj.turns[0].agent_events == ()
    assert "connector down" in traj.error


def test_agent_never_sees_reflections():
    histories = []

    class Spy:
        def step(self, history):
            histories.append(history)
            return [AgentMessage("ok")]

    provider, _ = user_world(["one", "two", "bye ###STOP###"])
    traj = run_trial(provider, make_sample(), EXPERT, Spy(), 1)
    reflections = {t.user_reflection for t in traj.turns}
    for history in histories:
        assert [m.role for m in history][0] == "user"
        assert not any(m.content in reflections for m in history)
    assert [m.content for m in histories[-1] if m.role == "user"] == ["one", "two"]


def test_user_history_includes_agent_replies():
    provider, seen = user_world(["one", "bye ###STOP###"])
    run_trial(provider, make_sample(), EXPERT, chatty_agent(), 1)
    last_respond = [r for r in seen if r.request_tag == "user_respond"][-1].messages[-1].content
    assert "USER: one" in last_respond and "AI ASSISTANT: agent reply 1" in last_respond
    assert "Reflection 2:" in last_respond


def test_trials_are_reproducible():
    def run():
        provider, _ = user_world(["a", "b", "c ###STOP###"])
        return run_trial(provider, make_sample(), EXPERT, chatty_agent(), 1).content_dict()

    assert run() == run()


def test_persona_does_not_change_sample():
    sample = make_sample()
    for persona in (EXPERT, NON_EXPERT):
        provider, seen = user_world(["x ###STOP###"])
        run_trial(provider, sample, persona, chatty_agent(), 1)
        assert sample.instruction in seen[0].messages[0].content


# -- many trials


def test_run_trials_counts_and_order():
    provider = FunctionProvider(lambda r: "done ###STOP###" if r.request_tag == "user_respond" else "reflect")
    trial_set = run_trials(provider, make_sample(n_trials=20), EXPERT, lambda i: chatty_agent(), 20, workers=4)
    assert [t.trial_index for t in trial_set.trajectories] == list(range(1, 21))
    single = run_trials(provider, make_sample(), EXPERT, lambda i: chatty_agent(), 1)
    assert len(single.trajectories) == 1


def test_run_trials_with_one_faulty_agent():
    class Broken:
        def step(self, history):
            raise RuntimeError("boom")

    provider = FunctionProvider(lambda r: "hello" if r.request_tag == "user_respond" else "reflect")
    trial_set = run_trials(provider, make_sample(max_turns=2), EXPERT, lambda i: Broken() if i == 5 else chatty_agent(), 8)
    assert len(trial_set.trajectories) == 8
    flagged = [t.trial_index for t in trial_set.trajectories if t.termination is Termination.AGENT_ERROR]
    assert flagged == [5]


def test_run_trials_records_user_proxy_failures():
    def respond(request):
        raise RuntimeError("user model offline")

    trial_set = run_trials(FunctionProvider(respond), make_sample(), EXPERT, lambda i: chatty_agent(), 3)
    assert trial_set.trajectories == ()
    assert sorted(trial_set.failures) == [1, 2, 3]


def test_run_trials_rejects_zero():
    with pytest.raises(ValueError):
        run_trials(ScriptedProvider([]), make_sample(), EXPERT, chatty_agent(), 0)


# -- reference agent


def wifi_call(call_id="c1"):
    return ChatResult(tool_calls=(ToolCall("set_wifi_status", '{"on": true}', call_id),))


def test_reference_agent_tool_then_message():
    registry, schemas = phone_settings()
    registry["set_low_battery_mode_status"](on=False)
    provider = ScriptedProvider([wifi_call(), "WiFi is on now."])
    events = reference_agent_step(provider, agent_history([], "turn wifi on"), registry, model="m", tool_schemas=schemas)
    assert [type(e) for e in events] == [ToolInvocation, AgentMessage]
    assert events[0].name == "set_wifi_status" and events[0].result == "wifi enabled"
    assert events[1].text == "WiFi is on now."
    provider.assert_exhausted()


def test_reference_agent_immediate_message():
    events = reference_agent_step(ScriptedProvider(["Hello!"]), agent_history([], "hi"), {}, model="m")
    assert events == [AgentMessage("Hello!")]


def test_reference_agent_unknown_tool():
    provider = ScriptedProvider([ChatResult(tool_calls=(ToolCall("launch_rocket", "{}", "c1"),)), "sorry"])
    events = reference_agent_step(provider, agent_history([], "go"), {}, model="m")
    assert events[0].name == "launch_rocket"
    assert events[0].result.startswith("ERROR: unknown tool")
    assert events[1] == AgentMessage("sorry")


def test_reference_agent_budget():
    registry, _ = phone_settings()
    provider = FunctionProvider(lambda r: ChatResult(tool_calls=(ToolCall("get_current_location", "{}", "c"),)))
    events = reference_agent_step(provider, agent_history([], "where"), registry, model="m", tool_budget=3)
    assert len([e for e in events if isinstance(e, ToolInvocation)]) == 3
    assert events[-1] == AgentMessage(BUDGET_EXCEEDED_MESSAGE)


def test_reference_agent_feeds_tool_results_back():
    requests = []

    def respond(request):
        requests.append(request)
        return wifi_call() if len(requests) == 1 else "done"

    agent = ReferenceAgent(FunctionProvider(respond), "m", phone_settings()[0], system_prompt="be helpful")
    agent.step(agent_history([], "wifi"))
    second = requests[1].messages
    assert second[0].role == "system" and second[0].content == "be helpful"
    assert second[-1].role == "tool" and "ERROR" in second[-1].content  # low battery mode still on
    assert second[-2].tool_payload["tool_calls"][0]["name"] == "set_wifi_status"


def test_execute_tool_errors():
    registry, _ = phone_settings()
    assert execute_tool(registry, "get_current_location", "{}").startswith("ERROR: ConnectionError")
    assert execute_tool(registry, "set_wifi_status", "[1]").startswith("ERROR")
    assert execute_tool(registry, "set_wifi_status", "not json").startswith("ERROR")


def test_scripted_agent_from_json_and_exhaustion():
    agent = ScriptedAgent.from_json(
        [[{"type": "tool_invocation", "name": "f", "arguments": "{}", "result": "r"}, {"type": "message", "text": "hi"}]]
    )
    assert agent.step([]) == (ToolInvocation("f", "{}", "r", ""), AgentMessage("hi"))
    with pytest.raises(RuntimeError):
        agent.step([])
