"""The navigation agent and its per-step discussion with the expert roster.

Order of a discussion: instruction analysis once per episode, then per step
vision perception, completion estimation, N-way decision sampling and, only
when the samples disagree, thought fusion plus decision testing.
"""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

from .backends import Backend, BackendError, CompletionRequest, IntegrityError
from .environment import (
    SECTOR_COUNT,
    SECTOR_WIDTH,
    SUCCESS_THRESHOLD,
    EnvGraph,
    Episode,
    MetricsReport,
    candidates_in_sector,
    compute_metrics,
)
from .parsers import (
    STOP,
    ExecutionState,
    FusedGroup,
    InstructionAnalysis,
    Landmark,
    MalformedResponse,
    Prediction,
    ThoughtPrediction,
    format_execution_list,
    format_step,
    format_trajectory,
    ground_landmarks,
    parse_action_decomposition,
    parse_decision_test,
    parse_execution_state,
    parse_fused_thought,
    parse_landmark_extraction,
    parse_object_tags,
    parse_prediction,
    parse_scene_answer,
    parse_trajectory_summary,
    prediction_key,
    prediction_label,
)
from .roster import (
    ACTION_DECOMPOSITION,
    COMPLETION_ESTIMATION,
    DECISION_SAMPLING,
    DECISION_TESTING,
    EXPERT_GROUPS,
    EXPERT_SAMPLING,
    LANDMARK_EXTRACTION,
    LANDMARK_KINDS,
    NAVIGATOR,
    OBJECT_DETECTION,
    SCENE_OBSERVATION,
    THOUGHT_FUSION,
    TRAJECTORY_SUMMARY,
    Message,
    PromptPack,
    SamplingProfile,
    default_pack,
    scene_query_for,
)

log = logging.getLogger(__name__)

T = TypeVar("T")

REASK = (
    "Your previous reply could not be used ({reason}). "
    "Answer the same question again and follow the required output format exactly."
)

INSTRUCTION_ANALYSIS = "instruction_analysis"
VISION_PERCEPTION = "vision_perception"
COMPLETION_GROUP = "completion_estimation"
DECISION_TESTING_GROUP = "decision_testing"

# Position of each role within one step; the call log must be non-decreasing in it.
PHASE_RANK = {
    ACTION_DECOMPOSITION: 0.0,
    LANDMARK_EXTRACTION: 0.5,
    SCENE_OBSERVATION: 1.0,
    OBJECT_DETECTION: 1.0,
    TRAJECTORY_SUMMARY: 2.0,
    COMPLETION_ESTIMATION: 2.5,
    NAVIGATOR: 3.0,
    THOUGHT_FUSION: 4.0,
    DECISION_TESTING: 4.5,
}


class ExpertFailure(RuntimeError):
    def __init__(self, role: str, reason: str):
        super().__init__(f"{role}: {reason}")
        self.role = role
        self.reason = reason


class EpisodeAborted(RuntimeError):
    """Raised by :func:`run_episode`; carries the partial result."""

    def __init__(self, message: str, result: "EpisodeResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class AgentConfig:
    decision_sampling: SamplingProfile = DECISION_SAMPLING
    max_steps: int = 15
    ablation: frozenset[str] = frozenset()
    retry_limit: int = 2
    success_threshold: float = SUCCESS_THRESHOLD
    perception_workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - set(EXPERT_GROUPS)
        if unknown:
            raise ValueError(f"unknown expert group(s): {sorted(unknown)}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    def enabled(self, group: str) -> bool:
        return group not in self.ablation

    def to_dict(self) -> dict:
        return {
            "decision_sampling": self.decision_sampling.to_dict(),
            "max_steps": self.max_steps,
            "ablation": sorted(self.ablation),
            "retry_limit": self.retry_limit,
            "success_threshold": self.success_threshold,
        }


@dataclass
class SectorPerception:
    sector: int
    candidates: tuple[str, ...] = ()
    nearest: float | None = None
    scene_answers: list[tuple[str, str]] = field(default_factory=list)
    object_tags: list[str] = field(default_factory=list)
    raw_text: str | None = None
    available: bool = True

    def describe(self) -> str:
        lo = int(self.sector * SECTOR_WIDTH)
        head = f"Direction {self.sector} ({lo}-{lo + int(SECTOR_WIDTH)} deg): "
        head += f"navigable, next viewpoint {self.nearest:.1f} m away" if self.candidates else "not navigable"
        parts = [head]
        if not self.available:
            parts.append("perception unavailable")
        if self.raw_text is not None:
            parts.append(f"view: {self.raw_text or 'nothing notable'}")
        for _, answer in self.scene_answers:
            parts.append(answer)
        if self.object_tags:
            parts.append("objects: " + ", ".join(self.object_tags))
        return " | ".join(parts)

    def summary(self) -> str:
        bits = [a for _, a in self.scene_answers]
        if self.raw_text:
            bits.append(self.raw_text)
        if self.object_tags:
            bits.append(", ".join(self.object_tags))
        return f"direction {self.sector}: " + ("; ".join(bits) or "nothing notable")


@dataclass
class PerceptionBundle:
    sectors: tuple[SectorPerception, ...]

    def __post_init__(self) -> None:
        if [s.sector for s in self.sectors] != list(range(SECTOR_COUNT)):
            raise ValueError("a perception bundle covers sectors 0..11 in order")

    def environment_text(self) -> str:
        return "\n".join(s.describe() for s in self.sectors)

    def observation_summary(self) -> str:
        return "; ".join(s.summary() for s in self.sectors if s.candidates) or "no navigable direction"

    @property
    def question_count(self) -> int:
        return sum(len(s.scene_answers) for s in self.sectors)


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    viewpoint: str
    observation_summary: str
    thought: str
    prediction: Prediction
    execution_state: ExecutionState | None = None
    snapped: bool = False
    next_viewpoint: str | None = None
    forced_stop: bool = False

    def to_record(self) -> dict:
        return {
            "t": self.index,
            "viewpoint": self.viewpoint,
            "prediction": prediction_label(self.prediction) if self.prediction == STOP else self.prediction,
            "snapped": self.snapped,
            "thought": self.thought,
            "execution_state": self.execution_state.to_dict() if self.execution_state else None,
            "next_viewpoint": self.next_viewpoint,
            "forced_stop": self.forced_stop,
            "observation": self.observation_summary,
            "rendered": format_step(self.index, self.observation_summary, self.thought),
        }


@dataclass
class DecisionContext:
    instruction: str
    analysis: InstructionAnalysis
    trajectory: str
    execution_state: ExecutionState | None
    perception: PerceptionBundle
    step: int
    viewpoint: str


@dataclass
class Decision:
    final: Prediction
    samples: list[ThoughtPrediction]
    groups: list[FusedGroup]
    fallback: bool = False

    @property
    def thought(self) -> str:
        for g in self.groups:
            if g.prediction == self.final:
                return g.fused_thought
        return ""


@dataclass
class EpisodeResult:
    episode: Episode
    analysis: InstructionAnalysis | None
    steps: list[TrajectoryStep]
    visited: list[str]
    metrics: MetricsReport
    calls: list[dict]
    events: list[dict]
    error: str | None = None


def plurality(predictions: Sequence[Prediction]) -> Prediction:
    """Most frequent prediction; ties go to the lowest sector and STOP loses every tie."""
    counts = Counter(predictions)
    top = max(counts.values())
    return min((p for p, n in counts.items() if n == top), key=prediction_key)


def group_samples(samples: Sequence[ThoughtPrediction]) -> list[tuple[Prediction, list[str]]]:
    """Group thoughts by prediction; largest group first, ties by first appearance."""
    groups: dict[Prediction, list[str]] = {}
    for s in samples:
        groups.setdefault(s.prediction, []).append(s.thought)
    order = {p: i for i, p in enumerate(groups)}
    return sorted(groups.items(), key=lambda kv: (-len(kv[1]), order[kv[0]]))


def numbered(items: Sequence[str]) -> str:
    return "\n".join(f"{i}. {a}" for i, a in enumerate(items, 1)) or "none"


class Discussion:
    """One episode's worth of discussion state: world, backend, call log and events."""

    def __init__(
        self,
        world: EnvGraph,
        episode: Episode,
        backend: Backend,
        config: AgentConfig | None = None,
        pack: PromptPack | None = None,
    ):
        self.world = world
        self.episode = episode
        self.backend = backend
        self.config = config or AgentConfig()
        self.pack = pack or default_pack()
        self.calls: list[dict] = []
        self.events: list[dict] = []

    # ------------------------------------------------------------ plumbing

    def _event(self, step: int, kind: str, **detail) -> None:
        self.events.append({"step": step, "event": kind, **detail})
        log.info("episode %s step %d: %s %s", self.episode.id, step, kind, detail)

    def _request(self, role: str, messages: list[Message], sampling: SamplingProfile, step: int) -> CompletionRequest:
        return CompletionRequest(role, messages, sampling, meta={"episode": self.episode.id, "step": step})

    def ask(
        self,
        role: str,
        slots: dict,
        parse: Callable[[str], T],
        step: int,
        calls: list[dict] | None = None,
    ) -> T:
        """Ask one expert, re-asking on malformed replies up to ``retry_limit`` times."""
        calls = self.calls if calls is None else calls
        messages = self.pack.render(role, slots)
        for attempt in range(self.config.retry_limit + 1):
            request = self._request(role, messages, EXPERT_SAMPLING, step)
            entry = {"step": step, "role": role, "digest": request.digest, "attempt": attempt, "n": 1}
            try:
                reply = self.backend.complete(request).completions[0]
            except IntegrityError:
                calls.append({**entry, "status": "error"})
                raise
            except BackendError as exc:
                calls.append({**entry, "status": "error"})
                raise ExpertFailure(role, str(exc)) from exc
            try:
                value = parse(reply)
            except MalformedResponse as exc:
                calls.append({**entry, "status": "malformed"})
                messages = messages + [Message("assistant", reply), Message("user", REASK.format(reason=exc))]
                continue
            calls.append({**entry, "status": "ok"})
            return value
        raise ExpertFailure(role, f"malformed reply after {self.config.retry_limit} re-asks")

    # ------------------------------------------------------------ instruction analysis

    def analyze_instruction(self, instruction: str) -> InstructionAnalysis:
        if not instruction.strip():
            raise ValueError("empty instruction")
        if not self.config.enabled(INSTRUCTION_ANALYSIS):
            return InstructionAnalysis(actions=(instruction,))
        actions = self.ask(ACTION_DECOMPOSITION, {"instruction": instruction}, parse_action_decomposition, 0)

        def parse(raw: str) -> tuple[list[Landmark], list[str] | None]:
            landmarks, corrected = parse_landmark_extraction(raw, actions)
            return ground_landmarks(landmarks, instruction), corrected

        landmarks, corrected = self.ask(
            LANDMARK_EXTRACTION, {"instruction": instruction, "actions": numbered(actions)}, parse, 0
        )
        if corrected is not None:
            self._event(0, "actions_corrected", before=actions, after=corrected)
            actions = corrected
        return InstructionAnalysis(tuple(actions), tuple(landmarks), corrected is not None)

    # ------------------------------------------------------------ perception

    def pending_landmarks(self, landmarks: Sequence[Landmark], state: ExecutionState | None) -> list[Landmark]:
        if state is None or not state.executed:
            return list(landmarks)
        done = " | ".join(state.executed).lower()
        return [lm for lm in landmarks if lm.phrase.lower() not in done]

    def perceive(self, viewpoint: str, landmarks: Sequence[Landmark], step: int = 0) -> PerceptionBundle:
        kinds = [k for k in LANDMARK_KINDS if any(lm.kind == k for lm in landmarks)]
        vision = self.config.enabled(VISION_PERCEPTION)

        def one(sector: int) -> tuple[SectorPerception, list[dict], list[dict]]:
            cands = candidates_in_sector(self.world, viewpoint, sector)
            nearest = self.world.edge(viewpoint, cands[0]).distance if cands else None
            sp = SectorPerception(sector, tuple(cands), nearest)
            obs = self.world.observation(viewpoint, sector)
            calls: list[dict] = []
            events: list[dict] = []
            if not vision:
                sp.raw_text = obs.scene_text
                return sp, calls, events
            image = f"{obs.scene_text or 'nothing notable'}; objects: {', '.join(obs.object_tags) or 'none'}"
            base = {"viewpoint": viewpoint, "direction id": sector, "image": image}
            try:
                for kind in kinds:
                    question = scene_query_for(kind, sector, self.pack)
                    answer = self.ask(SCENE_OBSERVATION, {**base, "question": question}, parse_scene_answer, step, calls)
                    sp.scene_answers.append((question, answer))
                sp.object_tags = self.ask(OBJECT_DETECTION, base, parse_object_tags, step, calls)
            except ExpertFailure as exc:
                sp.available = False
                events.append({"step": step, "event": "sector_unavailable", "sector": sector, "reason": str(exc)})
            return sp, calls, events

        if self.config.perception_workers > 1 and vision:
            with ThreadPoolExecutor(max_workers=min(self.config.perception_workers, SECTOR_COUNT)) as pool:
                results = list(pool.map(one, range(SECTOR_COUNT)))
        else:
            results = [one(s) for s in range(SECTOR_COUNT)]
        for _, calls, events in results:
            self.calls.extend(calls)
            for ev in events:
                log.info("episode %s: %s", self.episode.id, ev)
            self.events.extend(events)
        return PerceptionBundle(tuple(sp for sp, _, _ in results))

    # ------------------------------------------------------------ completion estimation

    def estimate_completion(
        self,
        analysis: InstructionAnalysis,
        history: Sequence[TrajectoryStep],
        previous: ExecutionState | None = None,
        viewpoint: str | None = None,
        step: int = 0,
    ) -> tuple[ExecutionState, str]:
        """Return the execution state and the (summarized) trajectory text."""
        raw = format_trajectory(history)
        if not history:
            return ExecutionState.initial(analysis.actions), ""
        previous = previous or ExecutionState.initial(analysis.actions)
        instruction = self.episode.instruction

        def parse_summary(reply: str) -> str:
            blocks = parse_trajectory_summary(reply, len(history))
            return "\n".join(format_step(t, o, th) for t, o, th in blocks)

        try:
            trajectory = self.ask(
                TRAJECTORY_SUMMARY, {"instruction": instruction, "history": raw}, parse_summary, step
            )
        except ExpertFailure as exc:
            self._event(step, "summary_fallback", reason=str(exc))
            trajectory = raw
        slots = {
            "instruction": instruction,
            "viewpoint": viewpoint or history[-1].next_viewpoint or "",
            "actions": numbered(analysis.actions),
            "trajectory": trajectory,
        }
        try:
            state = self.ask(
                COMPLETION_ESTIMATION, slots, lambda r: parse_execution_state(r, analysis.actions), step
            )
        except ExpertFailure as exc:
            self._event(step, "completion_fallback", reason=str(exc))
            state = previous
        return state, trajectory

    # ------------------------------------------------------------ decision

    def decision_slots(self, ctx: DecisionContext) -> dict:
        landmarks = "\n".join(f"{i}. {lm.phrase} ({lm.kind})" for i, lm in enumerate(ctx.analysis.landmarks, 1))
        state_block = ""
        if ctx.execution_state is not None:
            state_block = self.pack.snippet(
                NAVIGATOR,
                "execution_state",
                {
                    "executed": format_execution_list(ctx.execution_state.executed),
                    "in_progress": format_execution_list(ctx.execution_state.in_progress),
                    "waiting": format_execution_list(ctx.execution_state.waiting),
                },
            )
        return {
            "instruction": ctx.instruction,
            "viewpoint": ctx.viewpoint,
            "step": ctx.step,
            "actions": numbered(ctx.analysis.actions),
            "landmarks": landmarks or "none",
            "trajectory": ctx.trajectory or "none (this is the first step)",
            "execution_state": state_block,
            "environment": ctx.perception.environment_text(),
        }

    def sample_predictions(self, ctx: DecisionContext) -> list[ThoughtPrediction]:
        wanted = self.config.decision_sampling.breadth
        diversity = self.config.decision_sampling.diversity
        messages = self.pack.render(NAVIGATOR, self.decision_slots(ctx))
        samples: list[ThoughtPrediction] = []
        entry = None
        for attempt in range(self.config.retry_limit + 1):
            request = self._request(NAVIGATOR, messages, SamplingProfile(diversity, wanted - len(samples)), ctx.step)
            entry = {"step": ctx.step, "role": NAVIGATOR, "digest": request.digest, "attempt": attempt,
                     "n": request.sampling.breadth}
            try:
                replies = self.backend.complete(request).completions
            except IntegrityError:
                self.calls.append({**entry, "status": "error"})
                raise
            except BackendError as exc:
                self.calls.append({**entry, "status": "error"})
                raise ExpertFailure(NAVIGATOR, str(exc)) from exc
            bad = []
            for reply in replies:
                try:
                    samples.append(parse_prediction(reply))
                except MalformedResponse as exc:
                    bad.append((reply, exc))
            entry["status"] = "ok" if not bad else "malformed"
            self.calls.append(entry)
            if len(samples) == wanted:
                break
            reply, exc = bad[0]
            messages = messages + [Message("assistant", reply), Message("user", REASK.format(reason=exc))]
        if not samples:
            raise ExpertFailure(NAVIGATOR, "no parseable prediction after re-asks")
        if len(samples) < wanted:
            self._event(ctx.step, "short_sample", wanted=wanted, got=len(samples))
        entry["predictions"] = [prediction_label(s.prediction) for s in samples]
        entry["unanimous"] = len({s.prediction for s in samples}) == 1
        return samples

    def decide(self, ctx: DecisionContext) -> Decision:
        samples = self.sample_predictions(ctx)
        grouped = group_samples(samples)
        if len(grouped) == 1:
            p, thoughts = grouped[0]
            return Decision(p, samples, [FusedGroup(p, thoughts[0], len(thoughts))])

        if not self.config.enabled(DECISION_TESTING_GROUP):
            groups = [FusedGroup(p, th[0], len(th)) for p, th in grouped]
            # largest group wins; ties keep the first sampled prediction
            return Decision(grouped[0][0], samples, groups)

        groups = []
        for p, thoughts in grouped:
            if len(thoughts) == 1:
                groups.append(FusedGroup(p, thoughts[0], 1))
                continue
            slots = {"prediction": prediction_label(p), "thoughts": "\n".join(f"- {t}" for t in thoughts)}
            try:
                fused = self.ask(THOUGHT_FUSION, slots, parse_fused_thought, ctx.step)
            except ExpertFailure as exc:
                self._event(ctx.step, "fusion_fallback", prediction=prediction_label(p), reason=str(exc))
                fused = " ".join(thoughts)
            groups.append(FusedGroup(p, fused, len(thoughts)))

        candidates = "\n".join(
            f"- Thought: {g.fused_thought} Prediction: {prediction_label(g.prediction)} (support {g.support})"
            for g in groups
        )
        slots = {
            "instruction": ctx.instruction,
            "viewpoint": ctx.viewpoint,
            "environment": ctx.perception.environment_text(),
            "candidates": candidates,
        }
        offered = [g.prediction for g in groups]
        try:
            final = self.ask(DECISION_TESTING, slots, lambda r: parse_decision_test(r, offered), ctx.step)
            return Decision(final, samples, groups)
        except ExpertFailure as exc:
            final = plurality([s.prediction for s in samples])
            self._event(ctx.step, "decision_fallback", chosen=prediction_label(final), reason=str(exc))
            return Decision(final, samples, groups, fallback=True)

    # ------------------------------------------------------------ movement

    def execute(self, prediction: Prediction, at: str, step: int = 0) -> tuple[str | None, bool, bool]:
        """Return ``(next viewpoint or None, snapped, forced_stop)``."""
        if prediction == STOP:
            return None, False, False
        cands = candidates_in_sector(self.world, at, prediction)
        if cands:
            return cands[0], False, False
        for offset in range(1, SECTOR_COUNT // 2 + 1):
            for sector in ((prediction + offset) % SECTOR_COUNT, (prediction - offset) % SECTOR_COUNT):
                cands = candidates_in_sector(self.world, at, sector)
                if cands:
                    self._event(step, "snapped", predicted=prediction, sector=sector)
                    return cands[0], True, False
        self._event(step, "forced_stop", predicted=prediction)
        return None, False, True

    # ------------------------------------------------------------ episode loop

    def run(self) -> EpisodeResult:
        ep = self.episode
        visited = [ep.start]
        steps: list[TrajectoryStep] = []
        analysis = None

        def result(error: str | None = None) -> EpisodeResult:
            metrics = compute_metrics(self.world, ep, visited, self.config.success_threshold)
            return EpisodeResult(ep, analysis, steps, visited, metrics, self.calls, self.events, error)

        try:
            try:
                analysis = self.analyze_instruction(ep.instruction)
            except ExpertFailure as exc:
                raise EpisodeAborted(f"instruction analysis failed: {exc}", result(f"analysis: {exc}")) from exc
            state = ExecutionState.initial(analysis.actions)
            completion_on = self.config.enabled(COMPLETION_GROUP)
            for t in range(1, self.config.max_steps + 1):
                at = visited[-1]
                bundle = self.perceive(at, self.pending_landmarks(analysis.landmarks, state), t)
                if completion_on:
                    state, trajectory = self.estimate_completion(analysis, steps, state, at, t)
                else:
                    trajectory = format_trajectory(steps)
                ctx = DecisionContext(ep.instruction, analysis, trajectory, state if completion_on else None, bundle, t, at)
                try:
                    decision = self.decide(ctx)
                except ExpertFailure as exc:
                    raise EpisodeAborted(f"decision failed at step {t}: {exc}", result(f"decision: {exc}")) from exc
                nxt, snapped, forced = self.execute(decision.final, at, t)
                steps.append(
                    TrajectoryStep(
                        index=t,
                        viewpoint=at,
                        observation_summary=bundle.observation_summary(),
                        thought=decision.thought,
                        prediction=decision.final,
                        execution_state=state if completion_on else None,
                        snapped=snapped,
                        next_viewpoint=nxt,
                        forced_stop=forced,
                    )
                )
                if nxt is None:
                    break
                visited.append(nxt)
            else:
                self._event(self.config.max_steps, "max_steps_reached")
        except IntegrityError as exc:
            raise EpisodeAborted(f"backend integrity failure: {exc}", result(f"integrity: {exc}")) from exc
        return result()


def run_episode(
    world: EnvGraph,
    episode: Episode,
    config: AgentConfig | None = None,
    backend: Backend | None = None,
    pack: PromptPack | None = None,
) -> EpisodeResult:
    if backend is None:
        raise ValueError("run_episode needs a backend")
    return Discussion(world, episode, backend, config, pack).run()


def check_discussion_order(calls: Sequence[dict]) -> list[str]:
    """Return violations of the per-step discussion order found in a call log."""
    problems = []
    by_step: dict[int, list[dict]] = {}
    for c in calls:
        by_step.setdefault(c["step"], []).append(c)
    for step, entries in sorted(by_step.items()):
        ranks = [PHASE_RANK[c["role"]] for c in entries]
        if step == 0 and any(r >= 1.0 for r in ranks):
            problems.append("step 0 contains per-step calls")
        if step > 0 and any(r < 1.0 for r in ranks):
            problems.append(f"step {step} contains instruction-analysis calls")
        if ranks != sorted(ranks):
            problems.append(f"step {step}: calls out of order {[c['role'] for c in entries]}")
        nav = [c for c in entries if c["role"] == NAVIGATOR and "unanimous" in c]
        testing = [c for c in entries if c["role"] in (THOUGHT_FUSION, DECISION_TESTING)]
        if len(nav) > 1:
            problems.append(f"step {step}: {len(nav)} completed decision samples")
        if nav and any(PHASE_RANK[c["role"]] < PHASE_RANK[NAVIGATOR] for c in entries[entries.index(nav[0]) + 1 :]):
            problems.append(f"step {step}: expert calls after the decision sample")
        if testing and (not nav or nav[0]["unanimous"]):
            problems.append(f"step {step}: fusion/testing after a unanimous sample")
    return problems
