"""Synthetic multi-agent traces with learnable structure and planted anomalies.

Normal trajectories follow a fixed role round-robin where every step's output
is a deterministic template over the query's content words and a word carried
from the previous step, so next-step embeddings are predictable from context.
Anomalies replace one recorded step's output with text from an unrelated
template family over a disjoint vocabulary; the steps after it continue from
the clean chain (the recording is corrupted, not the underlying process).

Placement follows the relative-position convention used elsewhere: a step t
is "early" when (t-1)/T < 0.2.
"""

from __future__ import annotations

import random
from dataclasses import replace

from .trace import Step, Trajectory, is_early_step

ROLES = ("planner", "solver", "checker")

VOCAB = (
    "amber", "anchor", "basin", "beacon", "birch", "bramble", "canyon",
    "cedar", "cinder", "cobalt", "crescent", "delta", "ember", "fathom",
    "fennel", "flint", "garnet", "glacier", "grove", "harbor", "hazel",
    "heron", "inlet", "juniper", "kestrel", "lagoon", "larch", "lichen",
    "marble", "meadow", "mesa", "moss", "nectar", "oriole", "osprey",
    "pebble", "pinean", "plume", "quartz", "raven", "reed", "ridge",
    "saffron", "sage", "shale", "sparrow", "spruce", "summit", "tundra",
    "walnut", "willow", "wren",
)

ANOMALY_VOCAB = (
    "zorvex", "quibbly", "fraznik", "glompus", "snerdle", "wuzzle",
    "blartho", "crimpet", "dranken", "plooshy", "skroning", "trazzle",
    "vexapod", "yumbrot", "jinkler", "moxifun", "neblart", "ovskert",
    "pryzzle", "quonset", "ruzzing", "smeldor", "thwickle", "umbrex",
)


def _choice(rng: random.Random, seq):
    return seq[int(rng.random() * len(seq)) % len(seq)]


def _normal_outputs(words: list[str], T: int) -> list[str]:
    outputs = []
    carry = words[0]
    for t in range(1, T + 1):
        role = ROLES[(t - 1) % len(ROLES)]
        if t == 1:
            text = (
                f"{role} round 1 outline covers {words[0]} {words[1]} "
                f"{words[2]} {words[3]} starting from {carry}"
            )
        else:
            a = words[(t - 1) % len(words)]
            b = words[(t + 1) % len(words)]
            text = (
                f"{role} round {t} continues from {carry} "
                f"handling {a} and {b} next"
            )
        carry = words[(t + 1) % len(words)] if t > 1 else words[0]
        outputs.append(text)
    return outputs


def anomaly_text(rng: random.Random) -> str:
    picks = [_choice(rng, ANOMALY_VOCAB) for _ in range(5)]
    return "sudden detour rambling about " + " ".join(picks)


def make_normal_trajectory(
    trajectory_id: str, rng: random.Random, T: int = 6, labeled: bool = False
) -> Trajectory:
    """One clean trajectory; label=0 on every step when ``labeled``."""
    words = [_choice(rng, VOCAB) for _ in range(4)]
    query = (
        f"task {trajectory_id}: combine {words[0]} {words[1]} "
        f"then {words[2]} {words[3]} and report the outcome"
    )
    label = 0 if labeled else None
    steps = tuple(
        Step(role=ROLES[(t - 1) % len(ROLES)], output=out, label=label)
        for t, out in enumerate(_normal_outputs(words, T), start=1)
    )
    return Trajectory(id=trajectory_id, query=query, steps=steps)


def plant_anomaly(
    trajectory: Trajectory, t: int, rng: random.Random
) -> Trajectory:
    """Replace the recorded output at step t with unrelated text; label it 1."""
    steps = list(trajectory.steps)
    for i, step in enumerate(steps, start=1):
        label = 1 if i == t else 0
        output = anomaly_text(rng) if i == t else step.output
        steps[i - 1] = Step(role=step.role, output=output, label=label)
    return replace(trajectory, steps=tuple(steps))


def make_normal_corpus(
    n: int, seed: int, T: int = 6, prefix: str = "normal"
) -> list[Trajectory]:
    rng = random.Random(seed)
    return [make_normal_trajectory(f"{prefix}-{i:04d}", rng, T=T) for i in range(n)]


def make_anomaly_corpus(
    n: int,
    seed: int,
    T: int = 6,
    early_fraction: float = 0.5,
    prefix: str = "anomalous",
) -> list[Trajectory]:
    """Labeled trajectories, each with exactly one planted anomaly.

    ``early_fraction`` of them have the anomaly placed at an early position
    ((t-1)/T < 0.2); the rest place it uniformly over the remaining steps.
    """
    rng = random.Random(seed)
    early_positions = [t for t in range(1, T + 1) if is_early_step(t, T)]
    late_positions = [t for t in range(1, T + 1) if not is_early_step(t, T)]
    out = []
    n_early = int(round(early_fraction * n))
    for i in range(n):
        base = make_normal_trajectory(f"{prefix}-{i:04d}", rng, T=T, labeled=True)
        if i < n_early:
            t = _choice(rng, early_positions)
        else:
            t = _choice(rng, late_positions)
        out.append(plant_anomaly(base, t, rng))
    return out
