import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CITY_NOTES, make_sample, make_trajectory, wifi_call
from judge_fixtures import GRADE_CORPUS, achieved_at_judge, curve_fixture
from ted.gateway import FunctionProvider, ScriptedProvider
from ted.judge import (
    Grade,
    InvalidAssessmentError,
    Judge,
    ProgressCurve,
    SubgoalAssessment,
    SubgoalVerdict,
    curve_from_achieved,
    find_achieved_turn,
    parse_grade,
    progress_from_assessments,
)
from ted.trajectory import AgentMessage, GradingNote


def verdicts(letters):
    return tuple(
        SubgoalVerdict(Grade.COMPLETE if x == "C" else Grade.INCOMPLETE, f"run {q}", q)
        for q, x in enumerate(letters, start=1)
    )


def wifi_judge():
    """Complete iff the trajectory view shows a set_wifi_status call."""

    def respond(request):
        prompt = request.messages[-1].content
        trajectory = prompt.split("[Agent Intermediate Trajectories]:", 1)[1].split("[Agent Responses Submission]", 1)[0]
        return "GRADE: C" if "tool_call: set_wifi_status" in trajectory else "No wifi call. GRADE: I"

    return FunctionProvider(respond)


@pytest.mark.parametrize("reply,expected", GRADE_CORPUS)
def test_parse_grade_corpus(reply, expected):
    assert parse_grade(reply).value == expected


@pytest.mark.parametrize(
    "letters,z,majority",
    [("CCICI", 0.6, Grade.COMPLETE), ("IIIII", 0.0, Grade.INCOMPLETE), ("CCC", 1.0, Grade.COMPLETE), ("CII", 1 / 3, Grade.INCOMPLETE)],
)
def test_assessment_counts(letters, z, majority):
    a = SubgoalAssessment("g1", verdicts(letters))
    assert a.z == z and a.majority is majority and a.q == len(letters)


@given(st.lists(st.booleans(), min_size=1, max_size=9).filter(lambda v: len(v) % 2 == 1))
def test_majority_consistent_with_z(votes):
    a = SubgoalAssessment("g", verdicts("".join("C" if v else "I" for v in votes)))
    assert a.z * a.q == sum(votes)
    assert (a.majority is Grade.COMPLETE) == (a.z > 0.5)


def test_assessment_round_trip():
    a = SubgoalAssessment("g1", verdicts("CIC"))
    assert SubgoalAssessment.from_dict(a.to_dict()) == a


def test_q_must_be_odd():
    with pytest.raises(ValueError):
        Judge(ScriptedProvider([]), q=4)


def test_judge_once_with_wifi_call():
    sample = make_sample(notes=("Agent should enable WiFi",))
    judge = Judge(wifi_judge(), q=1)
    v = judge.judge_once(sample, sample.grading_notes[0], make_trajectory([[wifi_call(), AgentMessage("done")]]))
    assert v.grade is Grade.COMPLETE and v.explanation == "GRADE: C"


def test_blank_trajectory_and_hallucinated_call_are_incomplete():
    sample = make_sample(notes=("Agent should enable WiFi",))
    judge = Judge(wifi_judge(), q=1)
    note = sample.grading_notes[0]
    assert judge.judge_once(sample, note, make_trajectory([[]])).grade is Grade.INCOMPLETE
    claim = make_trajectory([[AgentMessage("I have called set_wifi_status and wifi is on.")]])
    assert judge.judge_once(sample, note, claim).grade is Grade.INCOMPLETE


def test_judge_prompt_fills_every_section():
    sample = make_sample(notes=CITY_NOTES, instruction="Find my city.")
    judge = Judge(ScriptedProvider([]))
    prompt = judge.build_prompt(sample, sample.grading_notes[1], make_trajectory([[wifi_call(), AgentMessage("ok")]]))
    assert "Find my city." in prompt and "Agent should enable WiFi" in prompt
    assert "tool_call: set_wifi_status" in prompt and "[Dynamic Dialogue]:" in prompt
    assert "{" + "trajectory}" not in prompt
    assert "secret reflection" not in prompt


def test_unparseable_retries_then_flags():
    provider = ScriptedProvider(["hmm", "still thinking", "GRADE: C"])
    v = Judge(provider, q=1).judge_once(make_sample(), GradingNote("g1", "x"), make_trajectory([[]]))
    assert v.grade is Grade.COMPLETE and not v.unparseable

    provider = ScriptedProvider(["a", "b", "c"])
    v = Judge(provider, q=1).judge_once(make_sample(), GradingNote("g1", "x"), make_trajectory([[]]))
    assert v.grade is Grade.INCOMPLETE and v.unparseable
    provider.assert_exhausted()


def test_all_unparseable_assessment_is_invalid():
    provider = FunctionProvider(lambda r: "no idea")
    judge = Judge(provider, q=3)
    sample = make_sample()
    a = judge.assess_subgoal(sample, sample.grading_notes[0], make_trajectory([[]]))
    assert a.invalid and a.z == 0
    assert provider.calls == 9
    with pytest.raises(InvalidAssessmentError):
        judge.progress(sample, make_trajectory([[]]))


def test_assess_subgoal_scripted_sequence():
    provider = ScriptedProvider(["GRADE: C", "GRADE: C", "GRADE: I", "GRADE: C", "GRADE: I"])
    sample = make_sample()
    a = Judge(provider, q=5).assess_subgoal(sample, sample.grading_notes[0], make_trajectory([[]]))
    assert [v.run_index for v in a.verdicts] == [1, 2, 3, 4, 5]
    assert a.completes == 3 and a.z == 0.6 and a.majority is Grade.COMPLETE
    assert provider.calls_by_tag == {"judge": 5}


def test_progress_three_of_five():
    achieved = {f"note {j}": (1 if j < 3 else None) for j in range(5)}
    sample = make_sample(notes=list(achieved))
    judge = Judge(achieved_at_judge(achieved, dissent_every=4), q=5)
    assert judge.progress(sample, make_trajectory([[AgentMessage("x")]])) == 0.6


def test_progress_all_and_none():
    sample = make_sample(notes=("Agent should enable WiFi", "Agent should call set_wifi_status"))
    judge = Judge(wifi_judge(), q=3)
    assert judge.progress(sample, make_trajectory([[wifi_call()]])) == 1.0
    assert judge.progress(sample, make_trajectory([[]])) == 0.0


def test_curve_single_note_at_turn_one():
    sample, traj, achieved = curve_fixture([1], n_turns=3, t_max=15)
    curve = Judge(achieved_at_judge(achieved), q=3).progress_curve(sample, traj)
    assert curve.values == (1.0,) * 15
    assert curve.achieved_turn == {"g1": 1}


def test_curve_half_then_rest():
    sample, traj, achieved = curve_fixture([1, 2], n_turns=2, t_max=15)
    curve = Judge(achieved_at_judge(achieved), q=3).progress_curve(sample, traj)
    assert curve.values == (0.5,) + (1.0,) * 14
    assert curve.n_turns == 2 and curve.terminal == 1.0


def test_curve_held_flat_after_termination():
    sample, traj, achieved = curve_fixture([2, None, 3], n_turns=3, t_max=6)
    curve = Judge(achieved_at_judge(achieved), q=1).progress_curve(sample, traj)
    assert curve.values == (0.0, 1 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3)


def test_curve_needs_a_turn():
    sample, _, achieved = curve_fixture([1], n_turns=1, t_max=2)
    with pytest.raises(ValueError):
        Judge(achieved_at_judge(achieved), q=1).progress_curve(sample, make_trajectory([]))


def test_bisect_uses_fewer_calls():
    sample, traj, achieved = curve_fixture([7], n_turns=15, t_max=15)
    exhaustive = achieved_at_judge(achieved)
    bisect = achieved_at_judge(achieved)
    Judge(exhaustive, q=1).progress_curve(sample, traj, mode="exhaustive")
    Judge(bisect, q=1).progress_curve(sample, traj, mode="bisect")
    assert exhaustive.calls == 7 and bisect.calls <= 5


def test_curve_cache_is_filled_and_reused():
    sample, traj, achieved = curve_fixture([2, 3], n_turns=4, t_max=4)
    provider = achieved_at_judge(achieved)
    judge = Judge(provider, q=1)
    cache = {}
    judge.progress_curve(sample, traj, mode="exhaustive", cache=cache)
    calls = provider.calls
    judge.progress_curve(sample, traj, mode="exhaustive", cache=cache)
    assert provider.calls == calls
    assert ("g1", 2) in cache


@settings(max_examples=60)
@given(st.integers(min_value=1, max_value=12), st.data())
def test_bisect_matches_exhaustive_on_monotone_predicates(n, data):
    threshold = data.draw(st.one_of(st.none(), st.integers(min_value=1, max_value=n)))
    predicate = lambda t: threshold is not None and t >= threshold
    assert find_achieved_turn(predicate, n, "bisect") == find_achieved_turn(predicate, n, "exhaustive") == threshold


def test_find_achieved_turn_unknown_mode():
    with pytest.raises(ValueError):
        find_achieved_turn(lambda t: True, 3, "guess")


@given(st.lists(st.one_of(st.none(), st.integers(min_value=1, max_value=10)), min_size=1, max_size=6), st.integers(1, 12))
def test_curve_values_are_monotone_and_on_grid(achieved, t_max):
    curve = curve_from_achieved("s", 1, {f"g{i}": a for i, a in enumerate(achieved)}, t_max, 10)
    g = len(achieved)
    assert all(a <= b for a, b in zip(curve.values, curve.values[1:]))
    assert all(any(abs(v - m / g) < 1e-12 for m in range(g + 1)) for v in curve.values)


def test_progress_matches_curve_terminal():
    rng = random.Random(3)
    for _ in range(10):
        n_turns = rng.randint(1, 6)
        achieved_turns = [rng.choice([None, *range(1, n_turns + 1)]) for _ in range(rng.randint(1, 5))]
        sample, traj, achieved = curve_fixture(achieved_turns, n_turns, t_max=8)
        judge = Judge(achieved_at_judge(achieved, dissent_every=3), q=5)
        assert judge.progress(sample, traj) == judge.progress_curve(sample, traj).values[n_turns - 1]


def test_progress_from_assessments_needs_input():
    with pytest.raises(ValueError):
        progress_from_assessments([])


def test_curve_round_trip():
    curve = ProgressCurve("s", 2, (0.5, 1.0), {"g1": 1, "g2": None}, 2)
    assert ProgressCurve.from_dict(curve.to_dict()) == curve
