"""Mutated expert replies for parser robustness checks."""

import random

from expertnav.parsers import (
    STOP,
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
)

ACTIONS = ["walk past the sofa", "turn left", "stop"]
INSTRUCTION = "Walk past the sofa, turn left at the red door and stop."

SEEDS = {
    "decomposition": "1. walk past the sofa\n2. turn left\n3. stop",
    "landmarks": "Corrected actions: 1. turn left 2. walk past the sofa 3. stop\nLandmarks:\n1. the sofa (object)\n2. the red door (color)",
    "execution": (
        "Thought: the sofa is behind me.\nPrediction:\nExecuted Actions: 1. walk past the sofa\n"
        "In-progress Actions: 1. turn left\nActions Waiting to be Executed: 1. stop"
    ),
    "summary": "[Step 1] Observation: a hall Thought: go on\n[Step 2] Observation: a sofa Thought: turn",
    "scene": "I can see a kitchen with a white fridge.",
    "objects": "sofa, lamp; table\n- rug",
    "prediction": "Thought: the kitchen is to the right, direction 3. Prediction: 3",
    "test": "Thought: B has more support. Prediction: direction 7",
    "fusion": "Thought: both samples see the stairs ahead. Prediction: 4",
}

PARSERS = {
    "decomposition": parse_action_decomposition,
    "landmarks": lambda r: ground_landmarks(parse_landmark_extraction(r, ACTIONS)[0], INSTRUCTION),
    "execution": lambda r: parse_execution_state(r, ACTIONS),
    "summary": lambda r: parse_trajectory_summary(r, 2),
    "scene": parse_scene_answer,
    "objects": parse_object_tags,
    "prediction": parse_prediction,
    "test": lambda r: parse_decision_test(r, [3, 7, STOP]),
    "fusion": parse_fused_thought,
}

NOISE = [
    "Prediction:", "Prediction: stop", "Prediction: 12", "Prediction: -1", "Executed Actions:", "Landmarks:",
    "In-progress Actions:", "Actions Waiting to be Executed:", "[Step 3]", "Thought:", "Corrected actions:",
    "\n", "1.", "none", "é", "​", "{", "}", "[", "]", "(", ")", "\\", "**", "99999999999999999999",
    "direction", "stop", ",", ";", "\t", "\x00", "🚪",
]


def mutate(text: str, rng: random.Random) -> str:
    ops = rng.randint(1, 4)
    for _ in range(ops):
        op = rng.randrange(8)
        i = rng.randint(0, len(text))
        if op == 0 and text:
            j = min(len(text), i + rng.randint(1, 12))
            text = text[:i] + text[j:]
        elif op == 1:
            text = text[:i] + rng.choice(NOISE) + text[i:]
        elif op == 2:
            text = text[:i]
        elif op == 3:
            text = text[i:]
        elif op == 4:
            text = text + "\n" + text
        elif op == 5:
            text = text.upper() if rng.random() < 0.5 else text.lower()
        elif op == 6:
            text = text[:i] + "".join(chr(rng.randint(0, 0x2FFF)) for _ in range(rng.randint(1, 6))) + text[i:]
        else:
            words = text.split(" ")
            rng.shuffle(words)
            text = " ".join(words)
    return text


def corpus(n: int, seed: int = 0):
    """``n`` (parser name, mutated reply) pairs, cycling over every parser."""
    rng = random.Random(seed)
    names = sorted(SEEDS)
    out = []
    for k in range(n):
        name = names[k % len(names)]
        out.append((name, mutate(SEEDS[name], rng)))
    return out
