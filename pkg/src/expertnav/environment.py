"""Discrete graph world: viewpoints, headed edges, sector geometry and VLN metrics."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import networkx as nx

SECTOR_WIDTH = 30.0
SECTOR_COUNT = 12
SUCCESS_THRESHOLD = 3.0
EDGE_DISTANCE_TOLERANCE = 1e-6


class WorldError(ValueError):
    """Raised when a world or episode file violates its schema or invariants."""


class InvalidTrajectoryError(ValueError):
    pass


def sector_of(heading: float) -> int:
    """Return the 30-degree sector containing ``heading``; sectors are [30k, 30(k+1))."""
    if not isinstance(heading, (int, float)) or math.isnan(heading):
        raise ValueError(f"heading must be a number, got {heading!r}")
    if not 0.0 <= heading < 360.0:
        raise ValueError(f"heading {heading} outside [0, 360)")
    return int(heading // SECTOR_WIDTH)


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    heading: float
    distance: float

    @property
    def sector(self) -> int:
        return sector_of(self.heading)


@dataclass(frozen=True)
class Observation:
    scene_text: str = ""
    object_tags: tuple[str, ...] = ()


EMPTY_OBSERVATION = Observation()


@dataclass(frozen=True)
class EnvGraph:
    viewpoints: dict[str, tuple[float, float, float]]
    edges: tuple[Edge, ...]
    observations: dict[tuple[str, int], Observation] = field(default_factory=dict)
    _out: dict[str, tuple[Edge, ...]] = field(init=False, repr=False, compare=False)
    _nx: nx.DiGraph = field(init=False, repr=False, compare=False)
    _dist_cache: dict[str, dict[str, float]] = field(init=False, repr=False, compare=False)
    _lock: threading.Lock = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "edges", tuple(self.edges))
        out: dict[str, list[Edge]] = {vp: [] for vp in self.viewpoints}
        g = nx.DiGraph()
        g.add_nodes_from(self.viewpoints)
        for e in self.edges:
            for end in (e.source, e.target):
                if end not in self.viewpoints:
                    raise WorldError(f"edge {e.source}->{e.target}: unknown viewpoint {end!r}")
            if not 0.0 <= e.heading < 360.0:
                raise WorldError(f"edge {e.source}->{e.target}: heading {e.heading} outside [0, 360)")
            if not e.distance > 0:
                raise WorldError(f"edge {e.source}->{e.target}: distance must be > 0")
            out[e.source].append(e)
            # parallel edges: the shorter one defines graph distance
            if not g.has_edge(e.source, e.target) or g[e.source][e.target]["weight"] > e.distance:
                g.add_edge(e.source, e.target, weight=e.distance)
        object.__setattr__(self, "_out", {k: tuple(v) for k, v in out.items()})
        object.__setattr__(self, "_nx", g)
        object.__setattr__(self, "_dist_cache", {})
        object.__setattr__(self, "_lock", threading.Lock())

    def outgoing(self, viewpoint: str) -> tuple[Edge, ...]:
        return self._out[viewpoint]

    def edge(self, source: str, target: str) -> Edge | None:
        best = None
        for e in self._out.get(source, ()):
            if e.target == target and (best is None or e.distance < best.distance):
                best = e
        return best

    def observation(self, viewpoint: str, sector: int) -> Observation:
        return self.observations.get((viewpoint, sector), EMPTY_OBSERVATION)

    def distances_to(self, target: str) -> dict[str, float]:
        """Geodesic distance from every viewpoint that can reach ``target``."""
        with self._lock:
            cached = self._dist_cache.get(target)
        if cached is None:
            cached = nx.single_source_dijkstra_path_length(self._nx.reverse(copy=False), target)
            with self._lock:
                self._dist_cache[target] = cached
        return cached

    def distances_from(self, source: str) -> dict[str, float]:
        """Geodesic distance to every viewpoint reachable from ``source``.

        Sums accumulate along the path from ``source``, the same order in which a
        trajectory length is summed, so a shortest trajectory reproduces it bit for bit.
        """
        key = "\0" + source
        with self._lock:
            cached = self._dist_cache.get(key)
        if cached is None:
            cached = nx.single_source_dijkstra_path_length(self._nx, source)
            with self._lock:
                self._dist_cache[key] = cached
        return cached

    def shortest_path(self, a: str, b: str) -> list[str]:
        try:
            return nx.dijkstra_path(self._nx, a, b)
        except nx.NetworkXNoPath:
            return []

    def is_strongly_connected(self) -> bool:
        return len(self.viewpoints) <= 1 or nx.is_strongly_connected(self._nx)

    def to_dict(self) -> dict:
        return {
            "viewpoints": {vp: list(pos) for vp, pos in self.viewpoints.items()},
            "edges": [
                {"from": e.source, "to": e.target, "heading": e.heading, "distance": e.distance}
                for e in self.edges
            ],
            "observations": [
                {
                    "viewpoint": vp,
                    "sector": sector,
                    "scene_text": obs.scene_text,
                    "object_tags": list(obs.object_tags),
                }
                for (vp, sector), obs in sorted(self.observations.items())
            ],
        }


def candidates_in_sector(graph: EnvGraph, at: str, sector: int) -> list[str]:
    """Destinations of edges leaving ``at`` within ``sector``, nearest first, ties by id."""
    edges = [e for e in graph.outgoing(at) if e.sector == sector]
    edges.sort(key=lambda e: (e.distance, e.target))
    return [e.target for e in edges]


def geodesic(graph: EnvGraph, a: str, b: str) -> float:
    """Shortest-path length over edge distances; ``math.inf`` when unreachable."""
    for vp in (a, b):
        if vp not in graph.viewpoints:
            raise KeyError(f"unknown viewpoint {vp!r}")
    return float(graph.distances_from(a).get(b, math.inf))


@dataclass(frozen=True)
class Episode:
    id: str
    instruction: str
    start: str
    goal: str
    reference_path: tuple[str, ...]
    shortest_length: float
    world: str | None = None

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "instruction": self.instruction,
            "start": self.start,
            "goal": self.goal,
            "reference_path": list(self.reference_path),
        }
        if self.world is not None:
            rec["world"] = self.world
        return rec


@dataclass(frozen=True)
class MetricsReport:
    TL: float
    NE: float
    SR: float
    OSR: float
    SPL: float
    success_threshold: float = SUCCESS_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "TL": self.TL,
            "NE": self.NE,
            "SR": self.SR,
            "OSR": self.OSR,
            "SPL": self.SPL,
            "success_threshold": self.success_threshold,
        }


def path_length(graph: EnvGraph, visited: Sequence[str]) -> float:
    total = 0.0
    for a, b in zip(visited, visited[1:]):
        e = graph.edge(a, b)
        if e is None:
            raise InvalidTrajectoryError(f"no edge {a} -> {b}")
        total += e.distance
    return total


def compute_metrics(
    graph: EnvGraph,
    episode: Episode,
    visited: Sequence[str],
    success_threshold: float = SUCCESS_THRESHOLD,
) -> MetricsReport:
    if not visited or visited[0] != episode.start:
        raise InvalidTrajectoryError(f"trajectory must begin at start {episode.start!r}")
    tl = path_length(graph, visited)
    to_goal = graph.distances_to(episode.goal)
    ne = float(to_goal.get(visited[-1], math.inf))
    sr = 1.0 if ne < success_threshold else 0.0
    osr = 1.0 if min(to_goal.get(v, math.inf) for v in visited) < success_threshold else 0.0
    shortest = episode.shortest_length
    denom = max(tl, shortest)
    spl = sr if denom == 0 else sr * shortest / denom
    return MetricsReport(TL=tl, NE=ne, SR=sr, OSR=osr, SPL=spl, success_threshold=success_threshold)


_WORLD_SCHEMA = {
    "type": "object",
    "required": ["viewpoints", "edges"],
    "properties": {
        "viewpoints": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "array",
                "items": {"type": "number"},
                "minItems": 3,
                "maxItems": 3,
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "heading", "distance"],
                "properties": {
                    "from": {"type": "string"},
                    "to": {"type": "string"},
                    "heading": {"type": "number", "minimum": 0, "exclusiveMaximum": 360},
                    "distance": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "observations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["viewpoint", "sector"],
                "properties": {
                    "viewpoint": {"type": "string"},
                    "sector": {"type": "integer", "minimum": 0, "maximum": SECTOR_COUNT - 1},
                    "scene_text": {"type": "string"},
                    "object_tags": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}

_EPISODE_SCHEMA = {
    "type": "object",
    "required": ["id", "instruction", "start", "goal", "reference_path"],
    "properties": {
        "id": {"type": "string"},
        "instruction": {"type": "string", "minLength": 1},
        "start": {"type": "string"},
        "goal": {"type": "string"},
        "reference_path": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "world": {"type": "string"},
    },
}


def _schema_check(data, schema, what: str) -> None:
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise WorldError(f"{what}: schema violation at {where}: {exc.message}") from None


def world_from_dict(data: dict, name: str = "world") -> EnvGraph:
    _schema_check(data, _WORLD_SCHEMA, name)
    viewpoints = {vp: (float(p[0]), float(p[1]), float(p[2])) for vp, p in data["viewpoints"].items()}
    edges = []
    for rec in data["edges"]:
        src, dst = rec["from"], rec["to"]
        for end in (src, dst):
            if end not in viewpoints:
                raise WorldError(f"{name}: edge {src}->{dst} has dangling endpoint {end!r}")
        euclid = math.dist(viewpoints[src], viewpoints[dst])
        if abs(euclid - rec["distance"]) > EDGE_DISTANCE_TOLERANCE:
            raise WorldError(
                f"{name}: edge {src}->{dst} distance {rec['distance']} != euclidean {euclid:.9f}"
            )
        edges.append(Edge(src, dst, float(rec["heading"]), float(rec["distance"])))
    observations = {}
    for rec in data.get("observations", []):
        vp = rec["viewpoint"]
        if vp not in viewpoints:
            raise WorldError(f"{name}: observation for unknown viewpoint {vp!r}")
        observations[(vp, rec["sector"])] = Observation(
            rec.get("scene_text", ""), tuple(rec.get("object_tags", ()))
        )
    graph = EnvGraph(viewpoints, tuple(edges), observations)
    if not graph.is_strongly_connected():
        comps = sorted(nx.strongly_connected_components(graph._nx), key=len)
        raise WorldError(f"{name}: graph is disconnected; unreachable viewpoints include {sorted(comps[0])}")
    return graph


def load_world(path: str | Path) -> EnvGraph:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise WorldError(f"{path}: cannot read world file: {exc}") from None
    return world_from_dict(data, name=str(path))


def save_world(graph: EnvGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), indent=1) + "\n")


def episode_from_record(rec: dict, graph: EnvGraph, where: str = "episode") -> Episode:
    _schema_check(rec, _EPISODE_SCHEMA, where)
    ep_id = rec["id"]
    path = tuple(rec["reference_path"])
    for vp in (rec["start"], rec["goal"], *path):
        if vp not in graph.viewpoints:
            raise WorldError(f"episode {ep_id}: unknown viewpoint {vp!r}")
    if path[0] != rec["start"] or path[-1] != rec["goal"]:
        raise WorldError(f"episode {ep_id}: reference_path must run from start to goal")
    for a, b in zip(path, path[1:]):
        if graph.edge(a, b) is None:
            raise WorldError(f"episode {ep_id}: reference_path hop {a}->{b} is not an edge")
    shortest = geodesic(graph, rec["start"], rec["goal"])
    if math.isinf(shortest):
        raise WorldError(f"episode {ep_id}: goal {rec['goal']!r} unreachable from start")
    return Episode(
        id=ep_id,
        instruction=rec["instruction"],
        start=rec["start"],
        goal=rec["goal"],
        reference_path=path,
        shortest_length=shortest,
        world=rec.get("world"),
    )


def load_episodes(path: str | Path, worlds: dict[str, EnvGraph] | EnvGraph) -> list[Episode]:
    """Read a JSONL episode file; records name their world when several are loaded."""
    if isinstance(worlds, EnvGraph):
        worlds = {"": worlds}
    episodes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WorldError(f"{where}: {exc}") from None
        graph = resolve_world(worlds, rec.get("world"), where)
        episodes.append(episode_from_record(rec, graph, where))
    return episodes


def resolve_world(worlds: dict[str, EnvGraph], name: str | None, where: str = "episode") -> EnvGraph:
    if name is not None and name in worlds:
        return worlds[name]
    if len(worlds) == 1:
        return next(iter(worlds.values()))
    raise WorldError(f"{where}: world {name!r} not loaded")


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    lines = [json.dumps(ep.to_record()) for ep in episodes]
    Path(path).write_text("".join(line + "\n" for line in lines))
