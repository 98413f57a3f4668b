"""Expert roles, sampling profiles and the slot-filled prompt pack."""

from __future__ import annotations

import hashlib
import logging
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import yaml

log = logging.getLogger(__name__)

ACTION_DECOMPOSITION = "action_decomposition"
LANDMARK_EXTRACTION = "landmark_extraction"
SCENE_OBSERVATION = "scene_observation"
OBJECT_DETECTION = "object_detection"
TRAJECTORY_SUMMARY = "trajectory_summary"
COMPLETION_ESTIMATION = "completion_estimation"
THOUGHT_FUSION = "thought_fusion"
DECISION_TESTING = "decision_testing"
NAVIGATOR = "navigator"

EXPERT_ROLES = (
    ACTION_DECOMPOSITION,
    LANDMARK_EXTRACTION,
    SCENE_OBSERVATION,
    OBJECT_DETECTION,
    TRAJECTORY_SUMMARY,
    COMPLETION_ESTIMATION,
    THOUGHT_FUSION,
    DECISION_TESTING,
)
ALL_ROLES = EXPERT_ROLES + (NAVIGATOR,)

# Ablation groups and the expert roles that belong to each.
EXPERT_GROUPS: dict[str, tuple[str, ...]] = {
    "instruction_analysis": (ACTION_DECOMPOSITION, LANDMARK_EXTRACTION),
    "vision_perception": (SCENE_OBSERVATION, OBJECT_DETECTION),
    "completion_estimation": (TRAJECTORY_SUMMARY, COMPLETION_ESTIMATION),
    "decision_testing": (THOUGHT_FUSION, DECISION_TESTING),
}

LANDMARK_KINDS = ("room", "object", "color_qualified", "infrastructure", "other")


class TemplateError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass(frozen=True)
class SamplingProfile:
    """``diversity`` maps to sampling temperature, ``breadth`` to completions per request."""

    diversity: float = 0.0
    breadth: int = 1

    def __post_init__(self) -> None:
        if self.breadth < 1:
            raise ValueError("breadth must be >= 1")
        if not 0.0 <= self.diversity <= 2.0:
            raise ValueError("diversity must be within [0, 2]")

    def to_dict(self) -> dict:
        return {"diversity": self.diversity, "breadth": self.breadth}


EXPERT_SAMPLING = SamplingProfile(diversity=0.0, breadth=1)
DECISION_SAMPLING = SamplingProfile(diversity=1.0, breadth=5)


@dataclass(frozen=True)
class Message:
    speaker: str  # system | user | assistant
    content: str

    def to_dict(self) -> dict:
        return {"speaker": self.speaker, "content": self.content}


@dataclass(frozen=True)
class ExpertRole:
    id: str
    role_text: str
    task_text: str
    question: str
    sampling: SamplingProfile = EXPERT_SAMPLING
    extras: Mapping[str, str] = field(default_factory=dict)

    @property
    def slots(self) -> tuple[str, ...]:
        return template_slots(self.question)


def template_slots(template: str) -> tuple[str, ...]:
    names = []
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None and name not in names:
            names.append(name)
    return tuple(names)


def fill(template: str, slots: Mapping[str, object], where: str = "template") -> str:
    """Substitute ``{slot}`` placeholders; slot names may contain spaces."""
    out = []
    for literal, name, spec, conv in string.Formatter().parse(template):
        out.append(literal)
        if name is None:
            continue
        if name not in slots:
            raise TemplateError(f"{where}: missing slot '{name}'")
        value = slots[name]
        if conv:
            value = {"r": repr, "s": str, "a": ascii}[conv](value)
        out.append(format(value, spec or ""))
    return "".join(out)


@dataclass(frozen=True)
class PromptPack:
    roles: Mapping[str, ExpertRole]
    checksum: str
    source: str

    def __getitem__(self, role_id: str) -> ExpertRole:
        try:
            return self.roles[role_id]
        except KeyError:
            raise KeyError(f"unknown role {role_id!r}") from None

    def render(self, role_id: str, slots: Mapping[str, object]) -> list[Message]:
        role = self[role_id]
        system = role.role_text.strip() + "\n\n" + role.task_text.strip()
        return [Message("system", system), Message("user", fill(role.question, slots, role_id))]

    def snippet(self, role_id: str, name: str, slots: Mapping[str, object]) -> str:
        role = self[role_id]
        try:
            template = role.extras[name]
        except KeyError:
            raise TemplateError(f"{role_id}: no snippet {name!r}") from None
        return fill(template, slots, f"{role_id}.{name}")


def load_prompt_pack(directory: str | Path | None = None) -> PromptPack:
    """Load one ``<role>.yaml`` per role; ``None`` loads the pack bundled with the package."""
    if directory is None:
        base = resources.files("expertnav") / "prompts"
        source = "builtin"
    else:
        base = Path(directory)
        source = str(directory)
    digest = hashlib.sha256()
    roles = {}
    for role_id in ALL_ROLES:
        path = base / f"{role_id}.yaml"
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise FileNotFoundError(f"prompt pack {source}: missing {role_id}.yaml") from None
        digest.update(role_id.encode() + b"\0" + raw.encode() + b"\0")
        data = yaml.safe_load(raw)
        for key in ("role", "task", "question"):
            if not isinstance(data.get(key), str):
                raise ValueError(f"prompt pack {source}: {role_id}.yaml lacks '{key}'")
        roles[role_id] = ExpertRole(
            id=role_id,
            role_text=data["role"],
            task_text=data["task"],
            question=data["question"],
            sampling=DECISION_SAMPLING if role_id == NAVIGATOR else EXPERT_SAMPLING,
            extras=dict(data.get("extras") or {}),
        )
    pack = PromptPack(roles, digest.hexdigest(), source)
    log.info("prompt pack %s checksum %s", source, pack.checksum)
    return pack


_default_pack: PromptPack | None = None


def default_pack() -> PromptPack:
    global _default_pack
    if _default_pack is None:
        _default_pack = load_prompt_pack()
    return _default_pack


def render_prompt(role: str, slots: Mapping[str, object], pack: PromptPack | None = None) -> list[Message]:
    return (pack or default_pack()).render(role, slots)


def scene_query_for(kind: str, sector: int, pack: PromptPack | None = None) -> str:
    """Perception question for a landmark kind; asks about the type, never the landmark itself."""
    if kind not in LANDMARK_KINDS:
        raise ValueError(f"unknown landmark kind {kind!r}")
    if not 0 <= sector < 12:
        raise ValueError(f"sector {sector} outside 0..11")
    name = {"room": "room_query", "color_qualified": "color_query"}.get(kind, "object_query")
    return (pack or default_pack()).snippet(SCENE_OBSERVATION, name, {"sector": sector})
