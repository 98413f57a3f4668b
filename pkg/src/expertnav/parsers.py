"""Strict parsers for expert replies, plus the structured values they produce.

Every parser either returns a value or raises :class:`MalformedResponse`; no
other exception escapes for string input.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence, Union


STOP = "STOP"
Prediction = Union[int, str]

SECTORS = range(12)


class MalformedResponse(ValueError):
    """An expert reply that cannot be turned into the structure its role promises."""


@dataclass(frozen=True)
class Landmark:
    phrase: str
    kind: str = "other"

    def to_dict(self) -> dict:
        return {"phrase": self.phrase, "kind": self.kind}


@dataclass(frozen=True)
class InstructionAnalysis:
    actions: tuple[str, ...]
    landmarks: tuple[Landmark, ...] = ()
    corrected: bool = False

    def to_dict(self) -> dict:
        return {
            "actions": list(self.actions),
            "landmarks": [lm.to_dict() for lm in self.landmarks],
            "corrected": self.corrected,
        }


@dataclass(frozen=True)
class ExecutionState:
    executed: tuple[str, ...] = ()
    in_progress: tuple[str, ...] = ()
    waiting: tuple[str, ...] = ()

    @classmethod
    def initial(cls, actions: Sequence[str]) -> "ExecutionState":
        return cls(waiting=tuple(actions))

    def to_dict(self) -> dict:
        return {
            "executed": list(self.executed),
            "in_progress": list(self.in_progress),
            "waiting": list(self.waiting),
        }


@dataclass(frozen=True)
class ThoughtPrediction:
    thought: str
    prediction: Prediction


@dataclass(frozen=True)
class FusedGroup:
    prediction: Prediction
    fused_thought: str
    support: int


def prediction_label(p: Prediction) -> str:
    return "stop" if p == STOP else str(p)


def prediction_key(p: Prediction) -> tuple[int, int]:
    """Sort key: sectors ascending, STOP last."""
    return (1, 0) if p == STOP else (0, int(p))


# ---------------------------------------------------------------- helpers

_WS = re.compile(r"\s+")
_NUMBERED = re.compile(r"(?:^|(?<=\s))\d{1,3}[.)]\s+")
_BULLET = re.compile(r"^\s*(?:[-*•]+|\d{1,3}[.)])\s*")
_EMPTY_WORDS = {"", "none", "nothing", "n/a", "na", "-", "[]", "null", "no"}


def _text(raw) -> str:
    if not isinstance(raw, str):
        raise MalformedResponse(f"expected text, got {type(raw).__name__}")
    return raw


def _clean_item(item: str) -> str:
    item = _WS.sub(" ", item).strip()
    item = item.strip("\"'`*").strip()
    return item.rstrip(".,;").strip()


def split_items(text: str) -> list[str]:
    """Split a numbered, bulleted, line-separated or JSON list into clean items."""
    text = text.strip()
    if text.lower().rstrip(".") in _EMPTY_WORDS:
        return []
    if text.startswith("["):
        try:
            value = json.loads(text)
        except ValueError:
            value = None
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return [c for c in (_clean_item(v) for v in value) if c]
    if _NUMBERED.search(text):
        pieces = _NUMBERED.split(text)[1:]
    else:
        pieces = text.splitlines()
        if len(pieces) == 1 and ";" in text:
            pieces = text.split(";")
    items = []
    for piece in pieces:
        piece = _BULLET.sub("", piece)
        piece = _clean_item(piece)
        if piece and piece.lower() not in _EMPTY_WORDS:
            items.append(piece)
    return items


def normalize_action(text: str) -> str:
    """Case-folded, punctuation-free, whitespace-collapsed form used for matching."""
    return _WS.sub(" ", re.sub(r"[^\w\s]", " ", text.casefold())).strip()


def _last_label(pattern: str, text: str) -> re.Match | None:
    found = None
    for m in re.finditer(pattern, text, re.IGNORECASE):
        found = m
    return found


# ---------------------------------------------------------------- instruction analysis

def parse_action_decomposition(raw: str) -> list[str]:
    text = _text(raw).strip()
    if not text:
        raise MalformedResponse("empty action decomposition")
    if _NUMBERED.search(text):
        body = text[_NUMBERED.search(text).start():]
        actions = split_items(body)
    else:
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.strip().endswith(":")]
        actions = split_items("\n".join(lines))
    if not actions:
        raise MalformedResponse("no action found in decomposition reply")
    return actions


_KIND_ALIASES = {
    "room": "room",
    "scene": "room",
    "scene_level": "room",
    "room_type": "room",
    "object": "object",
    "object_level": "object",
    "furniture": "object",
    "color": "color_qualified",
    "colour": "color_qualified",
    "color_qualified": "color_qualified",
    "colour_qualified": "color_qualified",
    "colored_object": "color_qualified",
    "color_object": "color_qualified",
    "infrastructure": "infrastructure",
    "structure": "infrastructure",
    "other": "other",
}

_LANDMARK_PAREN = re.compile(r"^(?P<phrase>.+?)\s*[(\[]\s*(?P<kind>[^)\]]*)[)\]]\s*$")
_LANDMARK_SEP = re.compile(r"^(?P<phrase>.+?)\s*(?:\||:|\s-\s|\s\u2014\s)\s*(?P<kind>[A-Za-z _-]+)$")


def normalize_kind(kind: str) -> str | None:
    key = re.sub(r"[\s-]+", "_", kind.strip().lower())
    key = key.removesuffix("_landmark").removesuffix("_type") if key not in _KIND_ALIASES else key
    return _KIND_ALIASES.get(key)


def parse_landmark(item: str) -> Landmark:
    for pattern in (_LANDMARK_PAREN, _LANDMARK_SEP):
        m = pattern.match(item)
        if m:
            kind = normalize_kind(m.group("kind"))
            if kind is not None:
                return Landmark(_clean_item(m.group("phrase")), kind)
    return Landmark(_clean_item(item), "other")


_CORRECTED = r"corrected\s+(?:action\s+sequence|actions?)\s*:"
_LANDMARKS = r"\blandmarks?\s*:"


def parse_landmark_extraction(
    raw: str, prior_actions: Sequence[str] = ()
) -> tuple[list[Landmark], list[str] | None]:
    """Return landmarks and, when the reply reorders the actions, the corrected list."""
    text = _text(raw)
    lm_label = _last_label(_LANDMARKS, text)
    if lm_label is None:
        raise MalformedResponse("no 'Landmarks:' section in reply")
    landmarks = [parse_landmark(item) for item in split_items(text[lm_label.end():])]
    landmarks = [lm for lm in landmarks if lm.phrase]

    corrected = None
    fix = _last_label(_CORRECTED, text[: lm_label.start()])
    if fix is not None:
        actions = split_items(text[fix.end(): lm_label.start()])
        if actions and [normalize_action(a) for a in actions] != [normalize_action(a) for a in prior_actions]:
            corrected = actions
    return landmarks, corrected


def ground_landmarks(landmarks: Iterable[Landmark], instruction: str) -> list[Landmark]:
    """Map each phrase onto its verbatim span in the instruction; missing spans are malformed."""
    grounded = []
    for lm in landmarks:
        m = re.search(re.escape(lm.phrase), instruction, re.IGNORECASE)
        if m is None:
            raise MalformedResponse(f"landmark {lm.phrase!r} does not occur in the instruction")
        phrase = m.group(0)
        if all(g.phrase != phrase for g in grounded):
            grounded.append(Landmark(phrase, lm.kind))
    return grounded


# ---------------------------------------------------------------- completion estimation

_PREDICTION_LABEL = r"\bprediction\b\s*[*_]*\s*:?"
_STATE_LABELS = {
    "executed": r"\bexecuted\s+actions?\s*[*_]*\s*:",
    "in_progress": r"\bin[\s-]*progress\s+actions?\s*[*_]*\s*:",
    "waiting": r"\bactions?\s+waiting\s+to\s+be\s+executed\s*[*_]*\s*:",
}


def parse_execution_state(raw: str, actions: Sequence[str]) -> ExecutionState:
    text = _text(raw)
    label = _last_label(_PREDICTION_LABEL, text)
    if label is None:
        raise MalformedResponse("no 'Prediction' field in completion estimate")
    field_text = text[label.end():]

    spans = []
    for name, pattern in _STATE_LABELS.items():
        hits = list(re.finditer(pattern, field_text, re.IGNORECASE))
        if len(hits) != 1:
            raise MalformedResponse(f"expected exactly one '{name}' list, found {len(hits)}")
        spans.append((hits[0].start(), hits[0].end(), name))
    spans.sort()
    sections = {}
    for i, (_, end, name) in enumerate(spans):
        stop = spans[i + 1][0] if i + 1 < len(spans) else len(field_text)
        sections[name] = field_text[end:stop]

    remaining = Counter(normalize_action(a) for a in actions)
    assigned: dict[str, list[str]] = {}
    for name in ("executed", "in_progress", "waiting"):
        for item in split_items(sections[name]):
            candidates = [item]
            if normalize_action(item) not in remaining and "," in item:
                candidates = [c for c in (_clean_item(p) for p in item.split(",")) if c]
            for cand in candidates:
                key = normalize_action(cand)
                if key not in remaining:
                    raise MalformedResponse(f"unknown action {cand!r} in '{name}'")
                if remaining[key] == 0:
                    raise MalformedResponse(f"action {cand!r} listed more than once")
                remaining[key] -= 1
                assigned.setdefault(key, []).append(name)
    missing = [k for k, n in remaining.items() if n]
    if missing:
        raise MalformedResponse(f"actions missing from the partition: {missing}")

    order = {"executed": 0, "in_progress": 1, "waiting": 2}
    queues = {k: sorted(v, key=order.__getitem__) for k, v in assigned.items()}
    out: dict[str, list[str]] = {"executed": [], "in_progress": [], "waiting": []}
    for action in actions:
        out[queues[normalize_action(action)].pop(0)].append(action)
    return ExecutionState(tuple(out["executed"]), tuple(out["in_progress"]), tuple(out["waiting"]))


def format_execution_list(items: Sequence[str]) -> str:
    if not items:
        return "none"
    return " ".join(f"{i}. {a}" for i, a in enumerate(items, 1))


# ---------------------------------------------------------------- trajectory

def format_step(index: int, observation: str, thought: str) -> str:
    return f"[Step {index}] Observation: {observation} Thought: {thought}"


def format_trajectory(history: Sequence) -> str:
    """One ``[Step t] Observation: ... Thought: ...`` line per step, steps numbered from 1."""
    lines = []
    for expected, step in enumerate(history, 1):
        if step.index != expected:
            raise ValueError(f"history step {step.index} where {expected} was expected")
        lines.append(format_step(step.index, step.observation_summary, step.thought))
    return "\n".join(lines)


_STEP_BLOCK = re.compile(
    r"\[\s*Step\s*(\d+)\s*\]\s*Observation\s*:\s*(.*?)\s*Thought\s*:\s*(.*?)\s*(?=\[\s*Step\s*\d+\s*\]|\Z)",
    re.IGNORECASE | re.DOTALL,
)


def parse_trajectory_summary(raw: str, n_steps: int) -> list[tuple[int, str, str]]:
    text = _text(raw)
    blocks = [(int(t), _WS.sub(" ", o).strip(), _WS.sub(" ", th).strip()) for t, o, th in _STEP_BLOCK.findall(text)]
    if [b[0] for b in blocks] != list(range(1, n_steps + 1)):
        raise MalformedResponse(f"summary must contain steps 1..{n_steps}, got {[b[0] for b in blocks]}")
    return blocks


# ---------------------------------------------------------------- perception

def parse_scene_answer(raw: str) -> str:
    text = _WS.sub(" ", _text(raw)).strip()
    if not text:
        raise MalformedResponse("empty scene answer")
    return text


def parse_object_tags(raw: str) -> list[str]:
    text = _text(raw).strip()
    if not text:
        raise MalformedResponse("empty object tag reply")
    text = re.sub(r"^\s*(?:tags|objects)\s*:", "", text, flags=re.IGNORECASE)
    tags: list[str] = []
    for part in re.split(r"[,;\n]", text):
        tag = _clean_item(_BULLET.sub("", part)).lower()
        if tag and tag not in _EMPTY_WORDS and tag not in tags:
            tags.append(tag)
    return tags


# ---------------------------------------------------------------- decisions

_PREDICTION_VALUE = re.compile(
    r"""^[\s:*_"'`=>]*(?:direction(?:\s+id)?\s*[:#]?\s*)?(?P<value>\d+|stop)\b""",
    re.IGNORECASE,
)


def parse_prediction(raw: str) -> ThoughtPrediction:
    """Split a reply at its last ``Prediction`` label into thought and decision."""
    text = _text(raw)
    label = _last_label(_PREDICTION_LABEL, text)
    if label is None:
        raise MalformedResponse("no 'Prediction' field")
    m = _PREDICTION_VALUE.match(text[label.end():])
    if m is None:
        raise MalformedResponse("prediction is neither a direction id nor stop")
    value = m.group("value")
    if value.lower() == "stop":
        prediction: Prediction = STOP
    else:
        prediction = int(value)
        if prediction not in SECTORS:
            raise MalformedResponse(f"direction {prediction} outside 0..11")
    thought = text[: label.start()].strip()
    thought = re.sub(r"^\s*[*_]*thought[*_]*\s*:\s*", "", thought, flags=re.IGNORECASE)
    return ThoughtPrediction(_WS.sub(" ", thought).strip(), prediction)


def parse_decision_test(raw: str, candidates: Iterable[Prediction]) -> Prediction:
    allowed = set(candidates)
    if not allowed:
        raise ValueError("decision test needs at least one candidate")
    choice = parse_prediction(raw).prediction
    if choice not in allowed:
        raise MalformedResponse(f"prediction {prediction_label(choice)} is not among the candidates")
    return choice


def parse_fused_thought(raw: str) -> str:
    text = _text(raw)
    label = _last_label(_PREDICTION_LABEL, text)
    if label is not None and _PREDICTION_VALUE.match(text[label.end():]):
        text = text[: label.start()]
    text = re.sub(r"^\s*[*_]*thought[*_]*\s*:\s*", "", text, flags=re.IGNORECASE)
    text = _WS.sub(" ", text).strip()
    if not text:
        raise MalformedResponse("empty fused thought")
    return text
