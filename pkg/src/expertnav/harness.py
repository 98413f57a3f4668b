"""Suite runner, ablation matrix, report tables and fixture generation."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .backends import (
    Backend,
    BackendConfigError,
    OracleBackend,
    RecordingBackend,
    RemoteBackend,
    ReplayBackend,
    ScriptedBackend,
)
from .engine import (
    COMPLETION_GROUP,
    DECISION_TESTING_GROUP,
    INSTRUCTION_ANALYSIS,
    VISION_PERCEPTION,
    AgentConfig,
    EpisodeAborted,
    EpisodeResult,
    numbered,
    run_episode,
)
from .environment import (
    EnvGraph,
    Episode,
    MetricsReport,
    compute_metrics,
    load_episodes,
    load_world,
    resolve_world,
    save_episodes,
    save_world,
)
from .parsers import STOP, prediction_label
from .roster import (
    ALL_ROLES,
    COMPLETION_ESTIMATION,
    DECISION_TESTING,
    EXPERT_GROUPS,
    LANDMARK_EXTRACTION,
    ACTION_DECOMPOSITION,
    NAVIGATOR,
    OBJECT_DETECTION,
    SCENE_OBSERVATION,
    THOUGHT_FUSION,
    TRAJECTORY_SUMMARY,
    PromptPack,
    load_prompt_pack,
)
from .synthetic import generate_synthetic_world, grammar_actions

log = logging.getLogger(__name__)

FULL_LABEL = "DiscussNav"
ABLATION_ROWS: tuple[tuple[str | None, str], ...] = (
    (None, FULL_LABEL),
    (INSTRUCTION_ANALYSIS, "w/o Instruction Analysis Experts"),
    (VISION_PERCEPTION, "w/o Vision Perception Experts"),
    (COMPLETION_GROUP, "w/o Completion Estimation Experts"),
    (DECISION_TESTING_GROUP, "w/o Decision Testing Experts"),
)
GROUP_LABELS = {g: label for g, label in ABLATION_ROWS if g}

METRIC_COLUMNS = ("TL", "NE", "OSR", "SR", "SPL")


@dataclass
class SuiteConfig:
    worlds: list[Path]
    episodes: Path
    backend: str = "oracle"
    seed: int = 0
    out: Path = Path("runs/latest")
    parallel: int = 1
    agent: AgentConfig = field(default_factory=AgentConfig)
    record: Path | None = None
    prompts: Path | None = None
    remote_profiles: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.worlds = [Path(p) for p in self.worlds]
        self.episodes = Path(self.episodes)
        self.out = Path(self.out)
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")

    def validate(self) -> None:
        if not self.worlds:
            raise FileNotFoundError("no world file given")
        for p in [*self.worlds, self.episodes]:
            if not p.exists():
                raise FileNotFoundError(f"{p} does not exist")

    def echo(self) -> dict:
        """Config fields that shape results; backend and paths are left out so replays compare equal."""
        return {"seed": self.seed, "agent": self.agent.to_dict()}


# ---------------------------------------------------------------- loading

def load_worlds(paths: Sequence[Path]) -> dict[str, EnvGraph]:
    """World files keyed by file stem; a directory contributes every ``*.json`` inside it."""
    files: list[Path] = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    worlds = {}
    for f in files:
        if f.stem in worlds:
            raise ValueError(f"two world files named {f.stem}")
        worlds[f.stem] = load_world(f)
    return worlds


def _remote_profile(name: str, profiles: Mapping[str, dict]) -> dict:
    if name in profiles:
        return dict(profiles[name])
    p = Path(name)
    if p.suffix in (".yaml", ".yml", ".json") and p.exists():
        return yaml.safe_load(p.read_text()) or {}
    if name in ("", "default"):
        return {}
    raise BackendConfigError(f"unknown remote profile {name!r}")


def make_backend(
    choice: str,
    worlds: Mapping[str, EnvGraph],
    episodes: Sequence[Episode],
    *,
    seed: int = 0,
    episodes_path: Path | None = None,
    remote_profiles: Mapping[str, dict] | None = None,
) -> Backend:
    kind, _, arg = choice.partition(":")
    if kind == "oracle":
        return OracleBackend(dict(worlds), episodes)
    if kind == "scripted":
        path = Path(arg) if arg else (episodes_path.parent / "scripted.json" if episodes_path else None)
        if path is None or not path.exists():
            raise BackendConfigError(f"scripted backend file not found: {path}")
        return ScriptedBackend.from_file(path, seed=seed)
    if kind == "replay":
        if not arg or not Path(arg).exists():
            raise BackendConfigError(f"replay transcript not found: {arg!r}")
        return ReplayBackend.from_file(arg)
    if kind == "remote":
        return RemoteBackend.from_profile(_remote_profile(arg, remote_profiles or {}))
    raise BackendConfigError(f"unknown backend {choice!r}")


# ---------------------------------------------------------------- running

@dataclass
class EpisodeOutcome:
    episode: Episode
    steps: list[dict]
    rendered: list[str]
    metrics: MetricsReport
    calls: list[dict]
    events: list[dict]
    error: str | None = None

    def record(self) -> dict:
        return {
            "id": self.episode.id,
            "world": self.episode.world,
            "steps": len(self.steps),
            "metrics": self.metrics.to_dict(),
            "error": self.error,
        }


def _outcome(result: EpisodeResult, error: str | None = None) -> EpisodeOutcome:
    metrics = result.metrics
    if error is not None:
        metrics = dataclasses.replace(metrics, SR=0.0, SPL=0.0)
    return EpisodeOutcome(
        result.episode,
        [s.to_record() for s in result.steps],
        [s.to_record()["rendered"] for s in result.steps],
        metrics,
        result.calls,
        result.events,
        error,
    )


def run_one(world: EnvGraph, episode: Episode, agent: AgentConfig, backend: Backend, pack: PromptPack | None = None) -> EpisodeOutcome:
    """Run an episode; aborts become failed outcomes instead of exceptions."""
    try:
        return _outcome(run_episode(world, episode, agent, backend, pack))
    except EpisodeAborted as exc:
        log.warning("episode %s aborted: %s", episode.id, exc)
        return _outcome(exc.result, str(exc))
    except Exception as exc:  # noqa: BLE001 - a broken episode must not stop the suite
        log.exception("episode %s crashed", episode.id)
        metrics = compute_metrics(world, episode, [episode.start], agent.success_threshold)
        metrics = dataclasses.replace(metrics, SR=0.0, SPL=0.0)
        return EpisodeOutcome(episode, [], [], metrics, [], [], f"{type(exc).__name__}: {exc}")


def _dump_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records))


def write_episode(out: Path, outcome: EpisodeOutcome) -> None:
    d = out / "episodes" / outcome.episode.id
    d.mkdir(parents=True, exist_ok=True)
    _dump_jsonl(d / "trajectory.jsonl", outcome.steps)
    (d / "trajectory.txt").write_text("".join(r + "\n" for r in outcome.rendered))
    _dump_jsonl(d / "calls.jsonl", outcome.calls)
    _dump_jsonl(d / "events.jsonl", outcome.events)
    (d / "episode.json").write_text(json.dumps(outcome.record(), indent=2, sort_keys=True) + "\n")


def call_counts(outcomes: Sequence[EpisodeOutcome]) -> dict[str, int]:
    counts = {role: 0 for role in ALL_ROLES}
    for o in outcomes:
        for c in o.calls:
            counts[c["role"]] += 1
    return counts


def aggregate(metrics: Sequence[MetricsReport]) -> dict[str, float]:
    """Means of TL and NE; OSR, SR and SPL as percentages."""
    n = len(metrics)
    if n == 0:
        return {k: 0.0 for k in METRIC_COLUMNS}

    def mean(attr: str) -> float:
        return sum(getattr(m, attr) for m in metrics) / n

    return {
        "TL": mean("TL"),
        "NE": mean("NE"),
        "OSR": 100.0 * mean("OSR"),
        "SR": 100.0 * mean("SR"),
        "SPL": 100.0 * mean("SPL"),
    }


def label_for(ablation: frozenset[str]) -> str:
    if not ablation:
        return FULL_LABEL
    if len(ablation) == 1:
        return GROUP_LABELS[next(iter(ablation))]
    return "w/o " + " + ".join(sorted(ablation))


def format_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    width = max([len("Method")] + [len(label) for label, _ in rows])
    lines = [f"{'Method':<{width}}" + "".join(f"{c:>8}" for c in METRIC_COLUMNS)]
    for label, agg in rows:
        lines.append(f"{label:<{width}}" + "".join(f"{agg[c]:>8.2f}" for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _prepare(config: SuiteConfig):
    config.validate()
    worlds = load_worlds(config.worlds)
    episodes = load_episodes(config.episodes, worlds)
    named = []
    for ep in episodes:
        if ep.world is None or ep.world not in worlds:
            world_name = next(n for n, g in worlds.items() if g is resolve_world(worlds, ep.world))
            ep = dataclasses.replace(ep, world=world_name)
        named.append(ep)
    pack = load_prompt_pack(config.prompts) if config.prompts else None
    return worlds, named, pack


def run_suite(config: SuiteConfig, *, backend: Backend | None = None, label: str | None = None) -> dict:
    """Run every episode, write per-episode logs plus ``suite_report.json`` and ``table.txt``."""
    worlds, episodes, pack = _prepare(config)
    if backend is None:
        # fail fast: a bad backend must not leave a partial output directory behind
        backend = make_backend(
            config.backend, worlds, episodes, seed=config.seed,
            episodes_path=config.episodes, remote_profiles=config.remote_profiles,
        )
    config.out.mkdir(parents=True, exist_ok=True)
    recorder = None
    if config.record is not None:
        recorder = backend = RecordingBackend(backend, config.record)
    t0 = time.perf_counter()
    try:
        def job(ep: Episode) -> EpisodeOutcome:
            outcome = run_one(worlds[ep.world], ep, config.agent, backend, pack)
            write_episode(config.out, outcome)
            return outcome

        if config.parallel > 1:
            with ThreadPoolExecutor(max_workers=config.parallel) as pool:
                outcomes = list(pool.map(job, episodes))
        else:
            outcomes = [job(ep) for ep in episodes]
    finally:
        if recorder is not None:
            recorder.close()
    elapsed = time.perf_counter() - t0

    label = label or label_for(config.agent.ablation)
    agg = aggregate([o.metrics for o in outcomes])
    report = {
        "label": label,
        "config": config.echo(),
        "episodes": [o.record() for o in outcomes],
        "aggregate": {**agg, "episodes": len(outcomes), "failures": sum(o.error is not None for o in outcomes)},
        "calls": call_counts(outcomes),
    }
    (config.out / "suite_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (config.out / "table.txt").write_text(format_table([(label, agg)]))
    log.info("%s: %d episodes in %.2fs, SR %.1f", label, len(outcomes), elapsed, agg["SR"])
    return report


def run_ablations(config: SuiteConfig) -> list[dict]:
    """Full pipeline plus one run per disabled expert group, each in its own subdirectory."""
    reports = []
    base_out = config.out
    for group, label in ABLATION_ROWS:
        ablation = frozenset({group}) if group else frozenset()
        row = dataclasses.replace(
            config,
            out=base_out / (group or "full"),
            agent=dataclasses.replace(config.agent, ablation=ablation),
            record=(base_out / f"transcript_{group or 'full'}.jsonl") if config.record else None,
        )
        reports.append(run_suite(row, label=label))
    full_sr = reports[0]["aggregate"]["SR"]
    summary = {
        "rows": [
            {
                "label": r["label"],
                "aggregate": r["aggregate"],
                "calls": r["calls"],
                "group_calls": {g: sum(r["calls"][role] for role in roles) for g, roles in EXPERT_GROUPS.items()},
                "sr_drop": full_sr - r["aggregate"]["SR"],
            }
            for r in reports
        ]
    }
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "ablation_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (base_out / "table.txt").write_text(format_ablation_table(summary["rows"]))
    return reports


def format_ablation_table(rows: Sequence[dict]) -> str:
    text = format_table([(r["label"], r["aggregate"]) for r in rows])
    groups = list(EXPERT_GROUPS)
    width = max(len(r["label"]) for r in rows)
    lines = ["", f"{'Method':<{width}}" + "".join(f"{g:>24}" for g in groups) + f"{'SR drop':>10}"]
    for r in rows:
        lines.append(
            f"{r['label']:<{width}}" + "".join(f"{r['group_calls'][g]:>24}" for g in groups) + f"{r['sr_drop']:>10.2f}"
        )
    return text + "\n".join(lines) + "\n"


# ---------------------------------------------------------------- fixtures

def _prefix(ep: Episode, vp: str) -> str:
    return re.escape(f"Instruction: {ep.instruction}\nCurrent viewpoint: {vp}\n")


def scripted_rules(world: EnvGraph, ep: Episode, oracle: OracleBackend) -> list[dict]:
    """Scripted replies that walk ``ep``'s reference path.

    Every other step the five decision samples split 3/2, so fusion and decision
    testing are exercised; the tester always backs the reference direction.
    """
    actions = grammar_actions(ep.instruction) or [ep.instruction]
    instr = re.escape(ep.instruction)
    rules = [
        {"role": ACTION_DECOMPOSITION, "match": f"instruction {instr}\\?",
         "replies": [oracle._decompose(ep, world, None, "")]},
        {"role": LANDMARK_EXTRACTION, "match": f"instruction {instr}\\?",
         "replies": [oracle._landmarks(ep, world, None, "")]},
    ]
    actions_text = f"Decomposed actions:\n{numbered(actions)}\nTrajectory:"
    for i, vp in enumerate(ep.reference_path):
        head = _prefix(ep, vp)
        if i > 0:
            rules.append({"role": COMPLETION_ESTIMATION, "match": head,
                          "replies": [oracle._completion(ep, world, vp, actions_text)]})
        pred = oracle.next_prediction(ep, world, vp)
        label = prediction_label(pred)
        good = [f"Thought: Sample {k}: the route continues in direction {label}. Prediction: {label}" for k in (1, 2, 3)]
        if i % 2 == 1:
            wrong = "stop" if pred != STOP else "0"
            bad = [f"Thought: Sample {k}: maybe direction {wrong} is better. Prediction: {wrong}" for k in (4, 5)]
            replies = good[:2] + bad[:1] + good[2:] + bad[1:]
        else:
            replies = good + [f"Thought: Sample {k}: direction {label} it is. Prediction: {label}" for k in (4, 5)]
        rules.append({"role": NAVIGATOR, "match": head, "replies": replies})
        rules.append({"role": DECISION_TESTING, "match": head,
                      "replies": [f"Thought: Direction {label} follows the route. Prediction: {label}"]})
    return rules


GENERIC_RULES = [
    {"role": SCENE_OBSERVATION, "match": r"Image \(direction \d+\): (?P<scene>[^;\n]*);",
     "replies": ["I can see \\g<scene>."], "expand": True},
    {"role": OBJECT_DETECTION, "match": r"; objects: (?P<tags>[^\n]*)", "replies": ["\\g<tags>"], "expand": True},
    {"role": TRAJECTORY_SUMMARY, "match": r"Navigation history:\n(?P<history>.*)\Z",
     "replies": ["\\g<history>"], "expand": True},
    {"role": THOUGHT_FUSION, "match": r"Thoughts:\n- (?P<first>[^\n]*)", "replies": ["Thought: \\g<first>"], "expand": True},
]

SCRIPTED_DEFAULTS = {NAVIGATOR: ["Thought: Nothing here matches the instruction. Prediction: stop"]}


def generate_fixtures(
    out: str | Path,
    seed: int = 7,
    n_worlds: int = 72,
    episodes_per_world: int = 1,
    n_viewpoints: int = 10,
) -> dict:
    """Write worlds/, episodes.jsonl, scripted.json and manifest.json under ``out``."""
    if min(n_worlds, episodes_per_world, n_viewpoints - 1) < 1:
        raise ValueError("counts must be >= 1 (and at least 2 viewpoints)")
    out = Path(out)
    if (out / "worlds").exists():
        shutil.rmtree(out / "worlds")
    (out / "worlds").mkdir(parents=True)
    all_episodes: list[Episode] = []
    worlds: dict[str, EnvGraph] = {}
    for k in range(n_worlds):
        name = f"world_{k:03d}"
        graph, eps = generate_synthetic_world(seed * 1000 + k, n_viewpoints, episodes_per_world, world_name=name)
        if len(eps) < episodes_per_world:
            raise RuntimeError(f"{name}: only {len(eps)} episodes could be generated")
        save_world(graph, out / "worlds" / f"{name}.json")
        worlds[name] = graph
        all_episodes += [dataclasses.replace(ep, id=f"{name}_ep{j:02d}") for j, ep in enumerate(eps)]
    save_episodes(all_episodes, out / "episodes.jsonl")

    oracle = OracleBackend(worlds, all_episodes)
    rules = []
    for ep in all_episodes:
        rules += scripted_rules(worlds[ep.world], ep, oracle)
    scripted = {"seed": seed, "rules": rules + GENERIC_RULES, "defaults": SCRIPTED_DEFAULTS}
    (out / "scripted.json").write_text(json.dumps(scripted, indent=1, sort_keys=True) + "\n")
    manifest = {
        "seed": seed,
        "worlds": n_worlds,
        "episodes_per_world": episodes_per_world,
        "viewpoints": n_viewpoints,
        "episodes": len(all_episodes),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
