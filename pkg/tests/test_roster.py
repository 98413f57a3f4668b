from importlib import resources

import pytest

from expertnav.roster import (
    ALL_ROLES,
    DECISION_SAMPLING,
    EXPERT_GROUPS,
    EXPERT_ROLES,
    EXPERT_SAMPLING,
    NAVIGATOR,
    SamplingProfile,
    TemplateError,
    default_pack,
    fill,
    load_prompt_pack,
    render_prompt,
    scene_query_for,
    template_slots,
)


def test_roster_has_eight_experts_in_four_groups():
    assert len(EXPERT_ROLES) == 8
    assert sorted(r for roles in EXPERT_GROUPS.values() for r in roles) == sorted(EXPERT_ROLES)
    assert list(EXPERT_GROUPS) == ["instruction_analysis", "vision_perception", "completion_estimation", "decision_testing"]


def test_sampling_defaults():
    assert EXPERT_SAMPLING == SamplingProfile(0.0, 1)
    assert DECISION_SAMPLING == SamplingProfile(1.0, 5)
    pack = default_pack()
    assert pack[NAVIGATOR].sampling == DECISION_SAMPLING
    assert all(pack[r].sampling == EXPERT_SAMPLING for r in EXPERT_ROLES)
    with pytest.raises(ValueError):
        SamplingProfile(0.0, 0)


def test_action_decomposition_golden():
    msgs = render_prompt("action_decomposition", {"instruction": "Stop just past the eye exam chart on the wall."})
    assert msgs[0].speaker == "system" and msgs[1].speaker == "user"
    assert msgs[1].content == "Can you decompose actions in the instruction Stop just past the eye exam chart on the wall.?"


def test_landmark_extraction_golden():
    msgs = render_prompt("landmark_extraction", {"instruction": "Go.", "actions": "1. go"})
    assert msgs[1].content == "Decomposed actions:\n1. go\nCan you extract landmarks in the instruction Go.?"


def test_scene_observation_golden():
    q = scene_query_for("room", 4)
    msgs = render_prompt("scene_observation", {"viewpoint": "v1", "direction id": 4, "image": "a sofa", "question": q})
    assert msgs[1].content == (
        "Current viewpoint: v1\nImage (direction 4): a sofa\nWhat room can you see in the current direction 4"
    )


def test_thought_fusion_golden():
    msgs = render_prompt("thought_fusion", {"prediction": "3", "thoughts": "- a\n- b"})
    assert msgs[1].content == "Prediction: 3\nThoughts:\n- a\n- b"


def test_missing_slot_names_the_slot():
    with pytest.raises(TemplateError, match="missing slot 'direction id'"):
        render_prompt("object_detection", {"viewpoint": "v1", "image": "x"})


def test_template_slots_allow_spaces():
    assert template_slots("a {direction id} b {x} {x}") == ("direction id", "x")
    assert fill("{direction id}!", {"direction id": 7}) == "7!"


@pytest.mark.parametrize(
    "kind,text",
    [
        ("room", "What room can you see in the current direction 2"),
        ("color_qualified", "What color of objects can you see in the current direction 2"),
        ("object", "What objects can you see in the current direction 2"),
        ("infrastructure", "What objects can you see in the current direction 2"),
    ],
)
def test_scene_queries_ask_about_kind(kind, text):
    assert scene_query_for(kind, 2) == text


def test_scene_query_rejects_bad_input():
    with pytest.raises(ValueError):
        scene_query_for("smell", 0)
    with pytest.raises(ValueError):
        scene_query_for("room", 12)


def test_navigator_prompt_has_completion_check_directive():
    pack = default_pack()
    assert "check" in pack.snippet(NAVIGATOR, "execution_state", {"executed": "", "in_progress": "", "waiting": ""})
    slots = set(pack[NAVIGATOR].slots)
    assert {"instruction", "actions", "landmarks", "trajectory", "execution_state", "environment", "step"} <= slots


def test_custom_pack_checksum_changes(tmp_path):
    src = resources.files("expertnav") / "prompts"
    for role in ALL_ROLES:
        (tmp_path / f"{role}.yaml").write_text((src / f"{role}.yaml").read_text())
    same = load_prompt_pack(tmp_path)
    assert same.checksum == default_pack().checksum
    p = tmp_path / "thought_fusion.yaml"
    p.write_text(p.read_text().replace("Thoughts:", "Rationales:"))
    changed = load_prompt_pack(tmp_path)
    assert changed.checksum != same.checksum
    (tmp_path / "navigator.yaml").unlink()
    with pytest.raises(FileNotFoundError):
        load_prompt_pack(tmp_path)
