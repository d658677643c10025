import sys
from pathlib import Path

import pytest

from ted.trajectory import (
    AgentMessage,
    GradingNote,
    PersonaKind,
    TaskSample,
    Termination,
    ToolInvocation,
    Trajectory,
    Turn,
)

ROOT = Path(__file__).resolve().parents[1]
DEMO = ROOT / "demo"
sys.path.insert(0, str(DEMO))

CITY_NOTES = (
    "Agent should ensure low battery mode is disabled",
    "Agent should enable WiFi",
    "Agent should enable WiFi after ensuring low battery mode is disabled",
    "Agent should enable location services",
    "Agent should enable location services after ensuring low battery mode is disabled",
    "Agent should call get_current_location to retrieve the user's location",
    "Agent should inform the user: You are currently in Cupertino",
)

AIRLINE_INSTRUCTION = (
    "Reason for Call: You had a mixup with your assistant and booked multiple flights for the same day. "
    "Known Information: You are Sophia Martin. Your user id is sophia_martin_4574. "
    "Task Instructions: You want to first check if there are cases like this in your profile."
)


def make_sample(sample_id="s1", notes=("Agent should enable WiFi",), max_turns=8, n_trials=8, instruction="Turn wifi on."):
    return TaskSample(
        id=sample_id,
        instruction=instruction,
        grading_notes=tuple(GradingNote(f"g{i}", t) for i, t in enumerate(notes, start=1)),
        max_turns=max_turns,
        n_trials=n_trials,
    )


def make_trajectory(turn_events, sample_id="s1", trial_index=1, termination=Termination.USER_TERMINATED):
    """``turn_events``: one list of events per turn."""
    turns = tuple(
        Turn(i, f"user says {i}", f"secret reflection {i}", tuple(events))
        for i, events in enumerate(turn_events, start=1)
    )
    return Trajectory(
        sample_id=sample_id,
        persona_kind=PersonaKind.EXPERT,
        trial_index=trial_index,
        turns=turns,
        termination=termination,
        started_at="2025-01-01T00:00:00+00:00",
        finished_at="2025-01-01T00:01:00+00:00",
    )


def wifi_call(on=True, result="wifi enabled"):
    return ToolInvocation("set_wifi_status", f'{{"on": {"true" if on else "false"}}}', result, "call_1")


@pytest.fixture
def city_sample():
    return make_sample("find_current_city_low_battery_mode", CITY_NOTES, max_turns=8, n_trials=8)


@pytest.fixture
def five_turn_trajectory():
    return make_trajectory(
        [
            [AgentMessage("Hi, how can I help?")],
            [ToolInvocation("set_low_battery_mode_status", '{"on": false}', "low battery mode disabled", "c1")],
            [wifi_call(), AgentMessage("WiFi is on.")],
            [ToolInvocation("get_current_location", "{}", '{"city": "Cupertino"}', "c3")],
            [AgentMessage("You are currently in Cupertino.")],
        ]
    )


# -- acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    passed = report.passed and _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}")
