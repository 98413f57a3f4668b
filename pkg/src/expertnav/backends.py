"""Completion backends: scripted, replay, recording, remote HTTP and a ground-truth oracle.

All of them take a :class:`CompletionRequest` and return exactly ``breadth``
completions, so the engine never needs to know which one it talks to.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx
import tenacity

from .environment import EnvGraph, Episode
from .parsers import STOP, parse_prediction, prediction_label, split_items
from .roster import (
    ACTION_DECOMPOSITION,
    COMPLETION_ESTIMATION,
    DECISION_TESTING,
    LANDMARK_EXTRACTION,
    NAVIGATOR,
    OBJECT_DETECTION,
    SCENE_OBSERVATION,
    THOUGHT_FUSION,
    TRAJECTORY_SUMMARY,
    Message,
    SamplingProfile,
)
from .synthetic import decompose, grammar_actions

log = logging.getLogger(__name__)

API_KEY_ENV = "EXPERTNAV_API_KEY"
API_URL_ENV = "EXPERTNAV_API_URL"


class BackendError(RuntimeError):
    pass


class RetryableBackendError(BackendError):
    pass


class TransportFailure(RetryableBackendError):
    pass


class BackendTimeout(RetryableBackendError):
    pass


class RateLimited(RetryableBackendError):
    pass


class BackendConfigError(BackendError):
    pass


class NoScriptMatch(BackendError):
    pass


class IntegrityError(BackendError):
    """Replay no longer matches the recorded run; never retried or masked by fallbacks."""


class TranscriptExhausted(IntegrityError):
    pass


class DigestMismatch(IntegrityError):
    pass


class OracleError(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    role: str
    messages: tuple[Message, ...]
    sampling: SamplingProfile
    meta: Mapping[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("a completion request needs at least one message")

    @property
    def digest(self) -> str:
        payload = {
            "role": self.role,
            "messages": [[m.speaker, m.content] for m in self.messages],
            "sampling": self.sampling.to_dict(),
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    @property
    def last_user(self) -> str:
        for m in reversed(self.messages):
            if m.speaker == "user":
                return m.content
        return ""


@dataclass(frozen=True)
class CompletionResult:
    completions: tuple[str, ...]
    latency_ms: float
    backend: str


class Backend:
    """Base class; subclasses implement :meth:`_complete` and must be thread-safe."""

    id = "backend"

    def complete(self, request: CompletionRequest) -> CompletionResult:
        t0 = time.perf_counter()
        completions = tuple(self._complete(request))
        if len(completions) != request.sampling.breadth:
            raise BackendError(
                f"{self.id}: {len(completions)} completions for breadth {request.sampling.breadth}"
            )
        return CompletionResult(completions, (time.perf_counter() - t0) * 1000.0, self.id)

    def _complete(self, request: CompletionRequest) -> Sequence[str]:
        raise NotImplementedError


def complete(backend: Backend, request: CompletionRequest) -> CompletionResult:
    return backend.complete(request)


# ---------------------------------------------------------------- scripted

Responder = Callable[[CompletionRequest, "re.Match[str]"], Sequence[str]]


@dataclass
class ScriptRule:
    pattern: re.Pattern
    replies: tuple[str, ...] = ()
    role: str | None = None
    expand: bool = False
    responder: Responder | None = None
    order: int = field(default=0, compare=False)


class ScriptedBackend(Backend):
    """Table-driven replies: the first rule whose regex matches the request text answers.

    With diversity 0, replies are returned in order (cycled up to ``breadth``).
    With diversity > 0 and more replies than requested, a sample is drawn from a
    generator seeded with ``seed`` and the request digest.
    """

    id = "scripted"

    def __init__(self, rules: Iterable[ScriptRule | dict] = (), defaults: Mapping[str, Sequence[str]] | None = None, seed: int = 0):
        self.rules_by_role: dict[str | None, list[ScriptRule]] = defaultdict(list)
        self.rules: list[ScriptRule] = []
        self._merged = {}
        for rule in rules:
            self.add_rule(rule)
        self.defaults = {k: tuple(v) for k, v in (defaults or {}).items()}
        self.seed = seed

    def add_rule(self, rule: ScriptRule | dict) -> None:
        if isinstance(rule, dict):
            rule = ScriptRule(
                pattern=re.compile(rule["match"], re.DOTALL),
                replies=tuple(rule.get("replies", ())),
                role=rule.get("role"),
                expand=rule.get("expand", False),
            )
        if not rule.replies and rule.responder is None:
            raise ValueError(f"rule {rule.pattern.pattern!r} has no replies")
        rule.order = len(self.rules)
        self.rules.append(rule)
        self.rules_by_role[rule.role].append(rule)
        self._merged: dict[str, list[ScriptRule]] = {}

    @classmethod
    def from_file(cls, path: str | Path, seed: int | None = None) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text())
        return cls(data.get("rules", []), data.get("defaults"), data.get("seed", 0) if seed is None else seed)

    def _candidates(self, role: str) -> list[ScriptRule]:
        merged = self._merged.get(role)
        if merged is None:
            merged = sorted(self.rules_by_role.get(role, []) + self.rules_by_role.get(None, []), key=lambda r: r.order)
            self._merged[role] = merged
        return merged

    def _complete(self, request: CompletionRequest) -> Sequence[str]:
        text = request.text
        for rule in self._candidates(request.role):
            m = rule.pattern.search(text)
            if m is None:
                continue
            if rule.responder is not None:
                replies = tuple(rule.responder(request, m))
            else:
                replies = tuple(m.expand(r) for r in rule.replies) if rule.expand else rule.replies
            return self._pick(replies, request)
        if request.role in self.defaults:
            return self._pick(self.defaults[request.role], request)
        raise NoScriptMatch(f"no scripted reply for role {request.role}")

    def _pick(self, replies: Sequence[str], request: CompletionRequest) -> list[str]:
        n = request.sampling.breadth
        if request.sampling.diversity > 0 and len(replies) > n:
            rng = random.Random(f"{self.seed}:{request.digest}")
            return rng.sample(list(replies), n)
        return [replies[i % len(replies)] for i in range(n)]


# ---------------------------------------------------------------- record / replay

class ReplayBackend(Backend):
    """Serves completions from a transcript, matching requests by digest.

    Records with the same digest are consumed in file order; concurrent callers
    are served by digest, not by arrival order.
    """

    id = "replay"

    def __init__(self, records: Iterable[dict]):
        self._queues: dict[str, deque] = defaultdict(deque)
        self._remaining = 0
        for rec in records:
            self._queues[rec["digest"]].append(rec)
            self._remaining += 1
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        lines = Path(path).read_text().splitlines()
        return cls(json.loads(line) for line in lines if line.strip())

    @property
    def remaining(self) -> int:
        return self._remaining

    def _complete(self, request: CompletionRequest) -> Sequence[str]:
        digest = request.digest
        with self._lock:
            if self._remaining == 0:
                raise TranscriptExhausted(f"transcript exhausted at {request.role} request")
            queue = self._queues.get(digest)
            if not queue:
                raise DigestMismatch(f"no recorded {request.role} request with digest {digest[:12]}")
            rec = queue.popleft()
            self._remaining -= 1
        return rec["completions"]


class RecordingBackend(Backend):
    """Wraps another backend and appends every exchange to a JSONL transcript."""

    def __init__(self, inner: Backend, sink: str | Path, meta: Mapping[str, object] | None = None, append: bool = False):
        self.inner = inner
        self.sink = Path(sink)
        self.meta = dict(meta or {})
        self._lock = threading.Lock()
        self._fh = open(self.sink, "a" if append else "w", encoding="utf-8")
        self.id = inner.id

    def complete(self, request: CompletionRequest) -> CompletionResult:
        result = self.inner.complete(request)
        record = {
            "digest": request.digest,
            "role": request.role,
            "completions": list(result.completions),
            "meta": {**self.meta, **request.meta},
        }
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
        return result

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def record(backend: Backend, sink: str | Path, meta: Mapping[str, object] | None = None) -> RecordingBackend:
    return RecordingBackend(backend, sink, meta)


# ---------------------------------------------------------------- remote

DEFAULT_MODELS = {
    "default": "gpt-4",
    TRAJECTORY_SUMMARY: "gpt-3.5-turbo",
    THOUGHT_FUSION: "gpt-3.5-turbo",
}


class RemoteBackend(Backend):
    """Client for an OpenAI-style chat-completions endpoint with retry and backoff."""

    def __init__(
        self,
        url: str,
        api_key: str,
        models: Mapping[str, str] | str | None = None,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        backoff_max: float = 30.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not url:
            raise BackendConfigError("remote backend needs an endpoint URL")
        if not api_key:
            raise BackendConfigError(f"remote backend needs a credential (set {API_KEY_ENV})")
        if isinstance(models, str):
            models = {"default": models}
        self.url = url
        self.models = {**DEFAULT_MODELS, **(models or {})}
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.backoff_max = backoff_max
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._sleep = sleep
        self.id = f"remote:{self.models['default']}"

    @classmethod
    def from_profile(cls, profile: Mapping[str, object], env: Mapping[str, str] = os.environ, **kwargs) -> "RemoteBackend":
        key_var = str(profile.get("api_key_env", API_KEY_ENV))
        api_key = env.get(key_var)
        if not api_key:
            raise BackendConfigError(f"remote backend credential missing: environment variable {key_var} is not set")
        url = profile.get("url") or env.get(API_URL_ENV)
        if not url:
            raise BackendConfigError(f"remote backend endpoint missing: set 'url' in the profile or {API_URL_ENV}")
        return cls(
            str(url),
            api_key,
            models=profile.get("models"),
            timeout=float(profile.get("timeout", 60.0)),
            max_attempts=int(profile.get("max_attempts", 3)),
            backoff=float(profile.get("backoff", 1.0)),
            **kwargs,
        )

    def model_for(self, role: str) -> str:
        return self.models.get(role, self.models["default"])

    def _complete(self, request: CompletionRequest) -> Sequence[str]:
        payload = {
            "model": self.model_for(request.role),
            "messages": [{"role": m.speaker, "content": m.content} for m in request.messages],
            "temperature": request.sampling.diversity,
            "n": request.sampling.breadth,
        }
        retrying = tenacity.Retrying(
            stop=tenacity.stop_after_attempt(self.max_attempts),
            wait=tenacity.wait_exponential(multiplier=self.backoff, max=self.backoff_max),
            retry=tenacity.retry_if_exception_type(RetryableBackendError),
            before_sleep=tenacity.before_sleep_log(log, logging.WARNING),
            sleep=self._sleep,
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                return self._post(payload, request.sampling.breadth)
        raise AssertionError("unreachable")

    def _post(self, payload: dict, breadth: int) -> list[str]:
        try:
            resp = self._client.post(self.url, json=payload, headers=self._headers, timeout=self.timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise TransportFailure(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited(f"rate limited: {resp.text[:200]}")
        if resp.status_code >= 500:
            raise TransportFailure(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"request rejected with {resp.status_code}: {resp.text[:200]}")
        try:
            choices = resp.json()["choices"]
            texts = [c["message"]["content"] for c in choices]
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError(f"unexpected response body: {exc}") from exc
        if len(texts) < breadth or not all(isinstance(t, str) for t in texts):
            raise BackendError(f"expected {breadth} choices, got {len(texts)}")
        return texts[:breadth]


# ---------------------------------------------------------------- oracle

_VIEWPOINT = re.compile(r"Current viewpoint:\s*(\S+)")
_DIRECTION = re.compile(r"Image \(direction (\d+)\)")


def _section(text: str, start: str, end: str | None = None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i:] if j < 0 else text[i:j]


class OracleBackend(Backend):
    """Answers every role from ground truth; only understands the bundled prompt pack."""

    id = "oracle"

    def __init__(self, worlds: Mapping[str, EnvGraph] | EnvGraph, episodes: Sequence[Episode]):
        if isinstance(worlds, EnvGraph):
            worlds = {"": worlds}
        self.worlds = dict(worlds)
        self.episodes = list(episodes)

    def _world_of(self, ep: Episode) -> EnvGraph:
        if ep.world in self.worlds:
            return self.worlds[ep.world]
        if len(self.worlds) == 1:
            return next(iter(self.worlds.values()))
        raise OracleError(f"world {ep.world!r} of episode {ep.id} not loaded")

    def _locate(self, request: CompletionRequest) -> tuple[Episode, EnvGraph, str | None]:
        text = request.last_user
        matches = [ep for ep in self.episodes if ep.instruction in text]
        if not matches:
            raise OracleError(f"{request.role} request does not mention a known episode")
        longest = max(len(ep.instruction) for ep in matches)
        matches = [ep for ep in matches if len(ep.instruction) == longest]
        m = _VIEWPOINT.search(text)
        vp = m.group(1) if m else None
        if vp is not None:
            located = [ep for ep in matches if vp in self._world_of(ep).viewpoints]
            if not located:
                raise OracleError(f"viewpoint {vp} not in any world of the matching episodes")
            matches = located
        ep = matches[0]
        return ep, self._world_of(ep), vp

    def next_prediction(self, ep: Episode, graph: EnvGraph, vp: str):
        if vp == ep.goal:
            return STOP
        path = list(ep.reference_path)
        if vp in path[:-1]:
            nxt = path[path.index(vp) + 1]
        else:
            route = graph.shortest_path(vp, ep.goal)
            if len(route) < 2:
                return STOP
            nxt = route[1]
        edge = graph.edge(vp, nxt)
        return edge.sector

    def _complete(self, request: CompletionRequest) -> Sequence[str]:
        role = request.role
        text = request.last_user
        if role in (SCENE_OBSERVATION, OBJECT_DETECTION):
            reply = self._perceive(request)
        else:
            ep, graph, vp = self._locate(request)
            handler = {
                ACTION_DECOMPOSITION: self._decompose,
                LANDMARK_EXTRACTION: self._landmarks,
                TRAJECTORY_SUMMARY: self._summary,
                COMPLETION_ESTIMATION: self._completion,
                THOUGHT_FUSION: self._fuse,
                DECISION_TESTING: self._test,
                NAVIGATOR: self._navigate,
            }.get(role)
            if handler is None:
                raise OracleError(f"oracle cannot answer role {role}")
            reply = handler(ep, graph, vp, text)
        return [reply] * request.sampling.breadth

    def _perceive(self, request: CompletionRequest) -> str:
        text = request.last_user
        vp_m, dir_m = _VIEWPOINT.search(text), _DIRECTION.search(text)
        if vp_m is None or dir_m is None:
            raise OracleError("perception request without viewpoint and direction")
        vp = vp_m.group(1)
        graphs = [g for g in self.worlds.values() if vp in g.viewpoints]
        if not graphs:
            raise OracleError(f"unknown viewpoint {vp}")
        obs = graphs[0].observation(vp, int(dir_m.group(1)))
        if request.role == OBJECT_DETECTION:
            return ", ".join(obs.object_tags) or "none"
        return f"I can see {obs.scene_text}." if obs.scene_text else "Nothing notable is visible."

    def _decompose(self, ep, graph, vp, text) -> str:
        actions = grammar_actions(ep.instruction)
        if actions is None:
            raise OracleError(f"episode {ep.id}: instruction outside the synthetic grammar")
        return "\n".join(f"{i}. {a}" for i, a in enumerate(actions, 1))

    def _landmarks(self, ep, graph, vp, text) -> str:
        clauses = decompose(ep.instruction) or []
        actions = grammar_actions(ep.instruction) or []
        fixed = " ".join(f"{i}. {a}" for i, a in enumerate(actions, 1))
        if not clauses:
            return f"Corrected actions: {fixed}\nLandmarks: none"
        lines = [f"{i}. {c.phrase} ({c.kind})" for i, c in enumerate(clauses, 1)]
        return f"Corrected actions: {fixed}\nLandmarks:\n" + "\n".join(lines)

    def _summary(self, ep, graph, vp, text) -> str:
        return _section(text, "Navigation history:\n").strip()

    def _completion(self, ep, graph, vp, text) -> str:
        actions = split_items(_section(text, "Decomposed actions:\n", "\nTrajectory:"))
        path = list(ep.reference_path)
        hops = len(path) - 1
        progress = path.index(vp) if vp in path else 0
        done = min(progress * len(actions) // (hops + 1), max(len(actions) - 1, 0))
        parts = [actions[:done], actions[done : done + 1], actions[done + 1 :]]

        def fmt(items):
            return " ".join(f"{i}. {a}" for i, a in enumerate(items, 1)) or "none"

        return (
            f"Thought: {progress} of {hops} movements along the route are done.\n"
            f"Prediction:\nExecuted Actions: {fmt(parts[0])}\n"
            f"In-progress Actions: {fmt(parts[1])}\n"
            f"Actions Waiting to be Executed: {fmt(parts[2])}"
        )

    def _navigate(self, ep, graph, vp, text) -> str:
        pred = self.next_prediction(ep, graph, vp)
        if pred == STOP:
            return "Thought: The goal of the instruction is reached. Prediction: stop"
        return f"Thought: The next landmark lies in direction {pred}. Prediction: {pred}"

    def _fuse(self, ep, graph, vp, text) -> str:
        thoughts = _section(text, "Thoughts:\n").strip().splitlines()
        first = thoughts[0] if thoughts else "The thoughts agree."
        return "Thought: " + re.sub(r"^\s*(?:-|\d+[.)])\s*", "", first)

    def _test(self, ep, graph, vp, text) -> str:
        section = _section(text, "Candidate thought-prediction pairs:\n")
        offered = []
        for line in section.splitlines():
            try:
                offered.append(parse_prediction(line).prediction)
            except ValueError:
                continue
        want = self.next_prediction(ep, graph, vp)
        choice = want if want in offered or not offered else offered[0]
        return f"Thought: Direction {prediction_label(want)} matches the route. Prediction: {prediction_label(choice)}"


def oracle_backend(worlds: Mapping[str, EnvGraph] | EnvGraph, episodes: Sequence[Episode]) -> OracleBackend:
    return OracleBackend(worlds, episodes)

