import re

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_episode, make_graph, pred, scripted
from expertnav.backends import ScriptRule
from expertnav.engine import (
    AgentConfig,
    DecisionContext,
    Discussion,
    EpisodeAborted,
    check_discussion_order,
    plurality,
    run_episode,
)
from expertnav.environment import Observation
from expertnav.parsers import STOP, ExecutionState, InstructionAnalysis, Landmark
from expertnav.roster import (
    ACTION_DECOMPOSITION,
    COMPLETION_ESTIMATION,
    DECISION_TESTING,
    LANDMARK_EXTRACTION,
    NAVIGATOR,
    OBJECT_DETECTION,
    SCENE_OBSERVATION,
    THOUGHT_FUSION,
    TRAJECTORY_SUMMARY,
    SamplingProfile,
)

VP = re.compile(r"Current viewpoint: (\S+)")


def by_viewpoint(mapping, default=(pred("stop", "done"),)):
    """Navigator responder choosing replies by the current viewpoint."""

    def respond(request, match):
        replies = mapping.get(VP.search(request.text).group(1), default)
        return [replies[i % len(replies)] for i in range(request.sampling.breadth)]

    return respond


def roles(calls):
    return [c["role"] for c in calls]


def context_at(d, viewpoint, step=1):
    analysis = d.analyze_instruction(d.episode.instruction)
    bundle = d.perceive(viewpoint, analysis.landmarks, step)
    return DecisionContext(d.episode.instruction, analysis, "", ExecutionState.initial(analysis.actions), bundle, step, viewpoint)


def test_consensus_short_circuit(star_world):
    ep = make_episode(star_world, "h", "n1")
    backend = scripted(by_viewpoint({"h": [pred(0)]}))
    result = run_episode(star_world, ep, AgentConfig(), backend)
    assert result.visited == ["h", "n1"]
    assert result.metrics.SR == 1.0
    assert THOUGHT_FUSION not in roles(result.calls) and DECISION_TESTING not in roles(result.calls)
    assert check_discussion_order(result.calls) == []


def test_three_two_split(star_world):
    ep = make_episode(star_world, "h", "n1")
    replies = [pred(0, "a"), pred(3, "b"), pred(0, "c"), pred(3, "d"), pred(0, "e")]
    d = Discussion(star_world, ep, scripted(by_viewpoint({"h": replies}), tester=pred(0, "test")))
    decision = d.decide(context_at(d, "h"))
    assert [(g.prediction, g.support) for g in decision.groups] == [(0, 3), (3, 2)]
    assert decision.final == 0
    assert roles(d.calls).count(THOUGHT_FUSION) == 2
    assert roles(d.calls).count(DECISION_TESTING) == 1


def test_two_two_one_forwards_all_groups(star_world):
    seen = []

    def tester(request, match):
        seen.append(request.last_user)
        return [pred(7)]

    ep = make_episode(star_world, "h", "n1")
    replies = [pred(3), pred(0), pred(3), pred(0), pred(7)]
    d = Discussion(star_world, ep, scripted(by_viewpoint({"h": replies}),
                                            extra=[ScriptRule(re.compile("."), responder=tester, role=DECISION_TESTING)]))
    decision = d.decide(context_at(d, "h"))
    assert [(g.prediction, g.support) for g in decision.groups] == [(3, 2), (0, 2), (7, 1)]
    assert roles(d.calls).count(THOUGHT_FUSION) == 2  # the singleton is not fused
    assert len(re.findall(r"Prediction: \w+ \(support", seen[0])) == 3
    assert decision.final == 7


def test_decision_test_failure_falls_back_to_plurality(star_world):
    ep = make_episode(star_world, "h", "n1")
    replies = [pred(3), pred(0), pred(3), pred(0), pred(7)]
    d = Discussion(star_world, ep, scripted(by_viewpoint({"h": replies}), tester="I refuse"))
    decision = d.decide(context_at(d, "h"))
    assert decision.fallback and decision.final == 0
    assert [c["status"] for c in d.calls if c["role"] == DECISION_TESTING] == ["malformed"] * 3
    assert any(e["event"] == "decision_fallback" for e in d.events)


def test_plurality_ties():
    assert plurality([3, 3, 0, 0, 7]) == 0
    assert plurality([STOP, STOP, 4, 4]) == 4
    assert plurality([STOP, STOP, 4]) == STOP


def test_without_decision_testing_uses_largest_group(star_world):
    ep = make_episode(star_world, "h", "n1")
    replies = [pred(3), pred(0), pred(0), pred(3), pred(0)]
    backend = scripted(by_viewpoint({"h": replies}), tester=pred(3))
    result = run_episode(star_world, ep, AgentConfig(ablation={"decision_testing"}), backend)
    assert result.steps[0].prediction == 0
    assert not {THOUGHT_FUSION, DECISION_TESTING} & set(roles(result.calls))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0, 3, 7, STOP]), min_size=5, max_size=5), st.integers(0, 4), st.booleans())
def test_selection_soundness(predictions, pick, tester_ok):
    g = make_graph({"h": (0, 0), "n1": (0, 2), "e": (2, 0), "sw": (-2, -2)}, [("h", "n1"), ("h", "e"), ("h", "sw")])
    ep = make_episode(g, "h", "n1")
    replies = [pred("stop" if p == STOP else p) for p in predictions]
    chosen = predictions[pick]
    tester = pred("stop" if chosen == STOP else chosen) if tester_ok else "no idea"
    d = Discussion(g, ep, scripted(by_viewpoint({"h": replies}), tester=tester))
    decision = d.decide(context_at(d, "h"))
    assert decision.final in predictions
    if len(set(predictions)) > 1 and tester_ok:
        assert decision.final == chosen


def test_execute_first_candidate_and_snapping(star_world):
    d = Discussion(star_world, make_episode(star_world, "h", "n1"), scripted([pred(0)]))
    assert d.execute(0, "h") == ("n1", False, False)
    assert d.execute(STOP, "h") == (None, False, False)
    assert d.execute(1, "h") == ("n1", True, False)
    # sectors 3 and 7 are equally far from 5: clockwise wins
    assert d.execute(5, "h") == ("sw", True, False)
    assert [e["event"] for e in d.events] == ["snapped", "snapped"]


def test_isolated_viewpoint_forces_stop():
    g = make_graph({"iso": (0, 0)}, [])
    ep = make_episode(g, "iso", "iso")
    result = run_episode(g, ep, AgentConfig(), scripted([pred(3)]))
    assert len(result.steps) == 1 and result.steps[0].forced_stop
    assert result.metrics.SR == 1.0


def test_max_steps_caps_episode(line_world):
    ep = make_episode(line_world, "a", "d")
    result = run_episode(line_world, ep, AgentConfig(max_steps=4), scripted([pred(0)]))
    assert [s.index for s in result.steps] == [1, 2, 3, 4]
    assert result.events[-1]["event"] == "max_steps_reached"
    assert result.visited == ["a", "b", "c", "d", "c"]
    assert result.metrics.SR == 1.0  # c is 2 m from d


def test_max_steps_one(line_world):
    ep = make_episode(line_world, "a", "d")
    result = run_episode(line_world, ep, AgentConfig(max_steps=1), scripted([pred(0)]))
    assert len(result.steps) == 1 and result.visited == ["a", "b"]
    assert result.metrics.NE == 4.0 and result.metrics.SR == 0.0


def _scene_questions(calls):
    return sum(1 for c in calls if c["role"] == SCENE_OBSERVATION)


@pytest.mark.parametrize(
    "landmarks,scene_calls",
    [
        ([Landmark("the kitchen", "room"), Landmark("the bedroom", "room")], 12),
        ([Landmark("the kitchen", "room"), Landmark("the red door", "color_qualified")], 24),
        ([], 0),
    ],
)
def test_perception_question_counts(star_world, landmarks, scene_calls):
    d = Discussion(star_world, make_episode(star_world, "h", "n1"), scripted([pred(0)]))
    bundle = d.perceive("h", landmarks)
    assert _scene_questions(d.calls) == scene_calls == bundle.question_count
    assert sum(1 for c in d.calls if c["role"] == OBJECT_DETECTION) == 12
    assert [s.sector for s in bundle.sectors] == list(range(12))
    assert "sink" in bundle.sectors[3].object_tags


def test_parallel_perception_is_deterministic(star_world):
    lms = [Landmark("the kitchen", "room"), Landmark("the sofa", "object")]
    ep = make_episode(star_world, "h", "n1")
    seq = Discussion(star_world, ep, scripted([pred(0)]))
    par = Discussion(star_world, ep, scripted([pred(0)]), AgentConfig(perception_workers=12))
    assert seq.perceive("h", lms).environment_text() == par.perceive("h", lms).environment_text()
    assert seq.calls == par.calls


def test_perception_reask_then_unavailable(star_world):
    def flaky(request, match):
        # answers only after being re-asked once
        return ["I can see a hall."] if "could not be used" in request.text else [""]

    d = Discussion(star_world, make_episode(star_world, "h", "n1"),
                   scripted([pred(0)], extra=[ScriptRule(re.compile("direction 3\\b"), ("",), role=SCENE_OBSERVATION),
                                               ScriptRule(re.compile("."), responder=flaky, role=SCENE_OBSERVATION)]))
    bundle = d.perceive("h", [Landmark("the kitchen", "room")])
    statuses = [(c["attempt"], c["status"]) for c in d.calls if c["role"] == SCENE_OBSERVATION]
    assert (0, "malformed") in statuses and (1, "ok") in statuses
    assert not bundle.sectors[3].available
    assert bundle.sectors[4].available
    assert [e["sector"] for e in d.events if e["event"] == "sector_unavailable"] == [3]


def test_instruction_analysis_failure_aborts_with_partial_result(star_world):
    ep = make_episode(star_world, "h", "n1")
    backend = scripted([pred(0)], actions="")
    with pytest.raises(EpisodeAborted) as info:
        run_episode(star_world, ep, AgentConfig(), backend)
    assert info.value.result.steps == []
    assert info.value.result.error.startswith("analysis")


def test_empty_instruction_rejected(star_world):
    d = Discussion(star_world, make_episode(star_world, "h", "n1"), scripted([pred(0)]))
    with pytest.raises(ValueError):
        d.analyze_instruction("  ")


def test_stop_instruction():
    g = make_graph({"a": (0, 0), "b": (0, 2)}, [("a", "b")])
    ep = make_episode(g, "a", "a", instruction="stop")
    d = Discussion(g, ep, scripted([pred("stop")], actions="1. stop", landmarks="Landmarks: none"))
    assert d.analyze_instruction("stop") == InstructionAnalysis(("stop",), ())


def test_landmark_expert_corrects_action_order(star_world):
    ep = make_episode(star_world, "h", "n1", instruction="Stop just past the sofa.")
    seen = []

    def nav(request, match):
        seen.append(request.last_user)
        return [pred(0)] * request.sampling.breadth if "Current viewpoint: h" in request.last_user else [pred("stop")] * request.sampling.breadth

    backend = scripted(nav, actions="1. stop\n2. walk past the sofa",
                       landmarks="Corrected actions: 1. walk past the sofa 2. stop\nLandmarks:\n1. the sofa (object)")
    result = run_episode(star_world, ep, AgentConfig(), backend)
    assert result.analysis.corrected
    assert result.analysis.actions == ("walk past the sofa", "stop")
    assert "Actions:\n1. walk past the sofa\n2. stop" in seen[0]
    assert result.events[0]["event"] == "actions_corrected"


def test_without_instruction_analysis(star_world):
    ep = make_episode(star_world, "h", "n1")
    result = run_episode(star_world, ep, AgentConfig(ablation={"instruction_analysis"}), scripted(by_viewpoint({"h": [pred(0)]})))
    assert result.analysis.actions == (ep.instruction,) and result.analysis.landmarks == ()
    assert not {ACTION_DECOMPOSITION, LANDMARK_EXTRACTION, SCENE_OBSERVATION} & set(roles(result.calls))


def test_without_completion_estimation_drops_state_block(star_world):
    seen = []

    def nav(request, match):
        seen.append(request.last_user)
        return [pred(0) if "viewpoint: h" in request.last_user else pred("stop")] * request.sampling.breadth

    ep = make_episode(star_world, "h", "n1")
    run_episode(star_world, ep, AgentConfig(), scripted(nav))
    assert "Execution state" in seen[0]
    seen.clear()
    result = run_episode(star_world, ep, AgentConfig(ablation={"completion_estimation"}), scripted(nav))
    assert seen and all("Execution state" not in s for s in seen)
    assert not {TRAJECTORY_SUMMARY, COMPLETION_ESTIMATION} & set(roles(result.calls))


def test_without_vision_perception(star_world):
    seen = []

    def nav(request, match):
        seen.append(request.last_user)
        return [pred("stop")] * request.sampling.breadth

    ep = make_episode(star_world, "h", "n1")
    result = run_episode(star_world, ep, AgentConfig(ablation={"vision_perception"}), scripted(nav))
    assert not {SCENE_OBSERVATION, OBJECT_DETECTION} & set(roles(result.calls))
    assert "view: a kitchen" in seen[0]


def test_summary_expert_output_feeds_completion(star_world):
    obs = dict(star_world.observations)
    obs[("h", 0)] = Observation("a hallway, a redundant object, the sofa", ("sofa",))
    g = type(star_world)(star_world.viewpoints, star_world.edges, obs)
    seen = []

    def summary(request, match):
        history = request.last_user.split("Navigation history:\n", 1)[1]
        return [re.sub(r",? ?a redundant object", "", history)]

    def completion(request, match):
        seen.append(request.last_user)
        return ["Prediction:\nExecuted Actions: none\nIn-progress Actions: 1. walk to the sofa\n"
                "Actions Waiting to be Executed: 1. stop"]

    ep = make_episode(g, "h", "n1")
    backend = scripted(
        by_viewpoint({"h": [pred(0)], "n1": [pred(6)]}),
        extra=[ScriptRule(re.compile("."), responder=summary, role=TRAJECTORY_SUMMARY),
               ScriptRule(re.compile("."), responder=completion, role=COMPLETION_ESTIMATION)],
    )
    result = run_episode(g, ep, AgentConfig(max_steps=3), backend)
    assert "redundant object" in result.steps[0].observation_summary
    assert seen and all("redundant object" not in s for s in seen)
    assert result.steps[1].execution_state.in_progress == ("walk to the sofa",)


def test_completion_fallback_keeps_previous_state(star_world):
    ep = make_episode(star_world, "h", "n1")
    bad = ScriptRule(re.compile("."), ("Prediction: nonsense",), role=COMPLETION_ESTIMATION)
    backend = scripted(by_viewpoint({"h": [pred(0)], "n1": [pred(6)]}), extra=[bad])
    result = run_episode(star_world, ep, AgentConfig(max_steps=2), backend)
    assert result.steps[1].execution_state == ExecutionState.initial(result.analysis.actions)
    assert any(e["event"] == "completion_fallback" for e in result.events)


def test_short_sample_is_tolerated(star_world):
    ep = make_episode(star_world, "h", "n1")
    replies = [pred(0), "garbage", pred(0), pred(0), pred(0)]
    backend = scripted(by_viewpoint({"h": replies}))
    result = run_episode(star_world, ep, AgentConfig(decision_sampling=SamplingProfile(1.0, 5)), backend)
    nav = [c for c in result.calls if c["role"] == NAVIGATOR]
    assert nav[0]["status"] == "malformed" and nav[1]["n"] == 1
    assert result.visited == ["h", "n1"]


def test_discussion_order_checker_flags_violations():
    good = [
        {"step": 0, "role": ACTION_DECOMPOSITION}, {"step": 0, "role": LANDMARK_EXTRACTION},
        {"step": 1, "role": SCENE_OBSERVATION}, {"step": 1, "role": NAVIGATOR, "unanimous": False},
        {"step": 1, "role": THOUGHT_FUSION}, {"step": 1, "role": DECISION_TESTING},
    ]
    assert check_discussion_order(good) == []
    swapped = good[:2] + [good[3], good[2]] + good[4:]
    assert check_discussion_order(swapped)
    unanimous = [dict(c, unanimous=True) if c["role"] == NAVIGATOR else c for c in good]
    assert check_discussion_order(unanimous)
    late = good + [{"step": 1, "role": SCENE_OBSERVATION}]
    assert check_discussion_order(late)
