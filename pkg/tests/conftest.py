import math
import re

import pytest

from expertnav.backends import ScriptedBackend, ScriptRule
from expertnav.environment import Edge, EnvGraph, Episode, Observation, geodesic
from expertnav.harness import generate_fixtures
from expertnav.roster import (
    COMPLETION_ESTIMATION,
    DECISION_TESTING,
    LANDMARK_EXTRACTION,
    ACTION_DECOMPOSITION,
    NAVIGATOR,
    OBJECT_DETECTION,
    SCENE_OBSERVATION,
    THOUGHT_FUSION,
    TRAJECTORY_SUMMARY,
)
from expertnav.synthetic import heading_between


def make_graph(positions, pairs, observations=None, directed=False):
    """EnvGraph from positions and (a, b) pairs; headings and distances follow geometry."""
    positions = {k: tuple(float(c) for c in v) + (0.0,) * (3 - len(v)) for k, v in positions.items()}
    edges = []
    for a, b in pairs:
        d = math.dist(positions[a], positions[b])
        edges.append(Edge(a, b, heading_between(positions[a], positions[b]), d))
        if not directed:
            edges.append(Edge(b, a, heading_between(positions[b], positions[a]), d))
    return EnvGraph(positions, tuple(edges), observations or {})


def make_episode(graph, start, goal, instruction="Walk to the sofa and stop.", ep_id="e1", path=None):
    path = path or graph.shortest_path(start, goal)
    return Episode(ep_id, instruction, start, goal, tuple(path), geodesic(graph, start, goal))


@pytest.fixture
def line_world():
    """a - b - c - d due north, 2 m apart."""
    g = make_graph({"a": (0, 0), "b": (0, 2), "c": (0, 4), "d": (0, 6)}, [("a", "b"), ("b", "c"), ("c", "d")])
    return g


@pytest.fixture
def star_world():
    """Hub ``h`` with spokes north (2 m and 4 m), east and south-west."""
    obs = {("h", 0): Observation("a hallway, the sofa", ("sofa",)), ("h", 3): Observation("a kitchen", ("sink",))}
    return make_graph(
        {"h": (0, 0), "n1": (0, 2), "n2": (0.1, 4), "e": (2, 0), "sw": (-2, -2)},
        [("h", "n1"), ("h", "n2"), ("h", "e"), ("h", "sw")],
        obs,
    )


def base_rules(actions="1. walk to the sofa\n2. stop", landmarks="Landmarks:\n1. the sofa (object)"):
    """Well-formed replies for every expert role except the navigator."""
    return [
        ScriptRule(re.compile("."), (actions,), role=ACTION_DECOMPOSITION),
        ScriptRule(re.compile("."), (landmarks,), role=LANDMARK_EXTRACTION),
        ScriptRule(re.compile(r"Image \(direction \d+\): (?P<s>[^;\n]*);"), ("I can see \\g<s>.",),
                   role=SCENE_OBSERVATION, expand=True),
        ScriptRule(re.compile(r"; objects: (?P<t>[^\n]*)"), ("\\g<t>",), role=OBJECT_DETECTION, expand=True),
        ScriptRule(re.compile(r"Navigation history:\n(?P<h>.*)\Z", re.S), ("\\g<h>",),
                   role=TRAJECTORY_SUMMARY, expand=True),
        ScriptRule(re.compile(r"Thoughts:\n- (?P<f>[^\n]*)"), ("Thought: \\g<f>",), role=THOUGHT_FUSION, expand=True),
    ]


def completion_responder(request, match):
    """Everything but the last action is in progress."""
    section = request.last_user.split("Decomposed actions:\n", 1)[1].split("\nTrajectory:", 1)[0]
    actions = [re.sub(r"^\d+\.\s*", "", ln) for ln in section.splitlines() if ln.strip()]
    fmt = lambda xs: " ".join(f"{i}. {a}" for i, a in enumerate(xs, 1)) or "none"  # noqa: E731
    return [
        "Thought: moving.\nPrediction:\n"
        f"Executed Actions: none\nIn-progress Actions: {fmt(actions[:-1])}\n"
        f"Actions Waiting to be Executed: {fmt(actions[-1:])}"
    ] * request.sampling.breadth


def scripted(navigator, tester=None, extra=(), **kw):
    """ScriptedBackend with well-formed experts; ``navigator`` is a list of replies or a responder."""
    rules = list(extra) + base_rules(**kw)
    rules.append(ScriptRule(re.compile("."), responder=completion_responder, role=COMPLETION_ESTIMATION))
    if callable(navigator):
        rules.append(ScriptRule(re.compile("."), responder=navigator, role=NAVIGATOR))
    else:
        rules.append(ScriptRule(re.compile("."), tuple(navigator), role=NAVIGATOR))
    if tester is not None:
        rules.append(ScriptRule(re.compile("."), (tester,), role=DECISION_TESTING))
    return ScriptedBackend(rules)


def pred(p, thought="going"):
    return f"Thought: {thought}. Prediction: {p}"


@pytest.fixture(scope="session")
def fixture_suite(tmp_path_factory):
    """20 generated worlds with one episode each."""
    out = tmp_path_factory.mktemp("suite")
    generate_fixtures(out, seed=7, n_worlds=20, episodes_per_world=1, n_viewpoints=10)
    return out
