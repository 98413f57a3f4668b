"""Seeded desk-scale worlds with a small instruction grammar the oracle can invert.

Instructions look like::

    Walk into the kitchen, then walk past the red carpet, then head to the staircase and stop.

Each clause corresponds to one hop of the reference path and names a landmark that
is planted in the observation of the sector the hop leaves through.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import networkx as nx

from .environment import (
    SECTOR_COUNT,
    Edge,
    EnvGraph,
    Episode,
    Observation,
    candidates_in_sector,
    geodesic,
    path_length,
)

LANDMARKS: dict[str, str] = {
    **{n: "room" for n in ("kitchen", "bedroom", "bathroom", "living room", "dining room", "office", "laundry room")},
    **{n: "object" for n in ("wooden chair", "sofa", "dining table", "bookshelf", "piano", "sink", "fireplace", "potted plant", "television")},
    **{n: "color_qualified" for n in ("red carpet", "blue lamp", "white cabinet", "green couch", "yellow painting", "black armchair")},
    **{n: "infrastructure" for n in ("staircase", "front door", "archway", "hallway", "balcony")},
}

ROOM_VERBS = ("walk into", "enter", "go into")
OTHER_VERBS = ("walk past", "go towards", "head to", "walk to")
VERBS = sorted(set(ROOM_VERBS + OTHER_VERBS), key=len, reverse=True)

FILLER_OBJECTS = ("wall", "ceiling light", "floor", "window", "picture frame", "vent", "outlet", "curtain", "rug", "vase")
ROOM_SCENES = ("a corridor", "a living area", "a small study", "an open hall", "a storage area")

STOP_SUFFIX = " and stop"


@dataclass(frozen=True)
class Clause:
    verb: str
    landmark: str

    @property
    def action(self) -> str:
        return f"{self.verb} the {self.landmark}"

    @property
    def phrase(self) -> str:
        return f"the {self.landmark}"

    @property
    def kind(self) -> str:
        return LANDMARKS.get(self.landmark, "other")


def compose_instruction(clauses: list[Clause]) -> str:
    body = ", then ".join(c.action for c in clauses)
    text = body + STOP_SUFFIX + "." if clauses else "stop."
    return text[0].upper() + text[1:]


def decompose(instruction: str) -> list[Clause] | None:
    """Invert :func:`compose_instruction`; ``None`` when the text is outside the grammar."""
    text = instruction.strip().rstrip(".")
    if not text:
        return None
    text = text[0].lower() + text[1:]
    if text == "stop":
        return []
    if not text.endswith(STOP_SUFFIX):
        return None
    clauses = []
    for part in text[: -len(STOP_SUFFIX)].split(", then "):
        for verb in VERBS:
            if part.startswith(verb + " the "):
                clauses.append(Clause(verb, part[len(verb) + 5 :]))
                break
        else:
            return None
    return clauses


def grammar_actions(instruction: str) -> list[str] | None:
    clauses = decompose(instruction)
    if clauses is None:
        return None
    return [c.action for c in clauses] + ["stop"]


def heading_between(a: tuple[float, float, float], b: tuple[float, float, float]) -> float:
    """Compass heading from ``a`` to ``b``: 0 along +y, increasing clockwise."""
    h = math.degrees(math.atan2(b[0] - a[0], b[1] - a[1])) % 360.0
    return 0.0 if h >= 360.0 else h


def _layout(rng: random.Random, n: int, spacing: float) -> list[tuple[float, float, float]]:
    cols = math.ceil(math.sqrt(n))
    points = []
    for i in range(n):
        row, col = divmod(i, cols)
        x = round(col * spacing + rng.uniform(-0.3, 0.3) * spacing, 3)
        y = round(row * spacing + rng.uniform(-0.3, 0.3) * spacing, 3)
        points.append((x, y, 0.0))
    return points


def _hops_are_first_candidates(graph: EnvGraph, path: list[str]) -> bool:
    for a, b in zip(path, path[1:]):
        e = graph.edge(a, b)
        if candidates_in_sector(graph, a, e.sector)[:1] != [b]:
            return False
    return True


def generate_synthetic_world(
    seed: int,
    n_viewpoints: int,
    n_episodes: int,
    *,
    spacing: float = 3.0,
    max_hops: int = 4,
    world_name: str | None = None,
) -> tuple[EnvGraph, list[Episode]]:
    """Build a connected world plus episodes whose reference paths are shortest paths.

    Every reference hop is the first candidate of its sector, so following the
    sector of each hop reproduces the reference path exactly.
    """
    if n_viewpoints < 2:
        raise ValueError("n_viewpoints must be >= 2")
    rng = random.Random(seed)
    ids: list[str] = []
    while len(ids) < n_viewpoints:
        vid = f"{rng.getrandbits(48):012x}"
        if vid not in ids:
            ids.append(vid)
    positions = dict(zip(ids, _layout(rng, n_viewpoints, spacing)))

    complete = nx.Graph()
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            complete.add_edge(a, b, weight=math.dist(positions[a], positions[b]))
    pairs = {tuple(sorted(e)) for e in nx.minimum_spanning_edges(complete, data=False)}
    for a, b, w in sorted(complete.edges(data="weight")):
        if w < 1.6 * spacing and rng.random() < 0.5:
            pairs.add(tuple(sorted((a, b))))

    edges = []
    for a, b in sorted(pairs):
        d = math.dist(positions[a], positions[b])
        edges.append(Edge(a, b, heading_between(positions[a], positions[b]), d))
        edges.append(Edge(b, a, heading_between(positions[b], positions[a]), d))

    scenes: dict[tuple[str, int], tuple[list[str], list[str]]] = {}
    for vp in ids:
        base = rng.choice(ROOM_SCENES)
        for sector in range(SECTOR_COUNT):
            tags = rng.sample(FILLER_OBJECTS, 2)
            scenes[(vp, sector)] = ([base], tags)
    bare = EnvGraph(positions, tuple(edges))
    for e in edges:
        scenes[(e.source, e.sector)][0].append("an open passage")

    episodes: list[Episode] = []
    used_instructions: set[str] = set()
    pairs_tried = 0
    while len(episodes) < n_episodes and pairs_tried < 500 * max(n_episodes, 1):
        pairs_tried += 1
        start, goal = rng.sample(ids, 2)
        path = bare.shortest_path(start, goal)
        hops = len(path) - 1
        if hops > max_hops and pairs_tried < 400 * max(n_episodes, 1):
            continue
        if not _hops_are_first_candidates(bare, path):
            continue
        if path_length(bare, path) != geodesic(bare, start, goal):
            continue
        clauses = []
        for a, b in zip(path, path[1:]):
            landmark = rng.choice(sorted(LANDMARKS))
            kind = LANDMARKS[landmark]
            verb = rng.choice(ROOM_VERBS if kind == "room" else OTHER_VERBS)
            clauses.append(Clause(verb, landmark))
        instruction = compose_instruction(clauses)
        if instruction in used_instructions:
            continue
        used_instructions.add(instruction)
        for (a, b), clause in zip(zip(path, path[1:]), clauses):
            text, tags = scenes[(a, bare.edge(a, b).sector)]
            text.append(f"the {clause.landmark}")
            tags.append(clause.landmark)
        episodes.append(
            Episode(
                id=f"ep{seed}_{len(episodes):03d}",
                instruction=instruction,
                start=start,
                goal=goal,
                reference_path=tuple(path),
                shortest_length=geodesic(bare, start, goal),
                world=world_name,
            )
        )

    observations = {
        key: Observation(", ".join(text), tuple(tags)) for key, (text, tags) in sorted(scenes.items())
    }
    return EnvGraph(positions, tuple(edges), observations), episodes
