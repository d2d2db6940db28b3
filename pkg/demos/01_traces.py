"""Trace data model: build, serialize, split, and inspect trajectories."""

import random

from masc import (
    Step,
    Trajectory,
    error_position_histogram,
    parse_trajectory,
    serialize_trajectory,
    split_dataset,
)
from masc.synthetic import make_anomaly_corpus

# A trajectory is a query plus ordered (role, output) steps; labels are
# optional per-step error annotations.
trajectory = Trajectory(
    id="demo-001",
    query="What is 7 + 5?",
    steps=(
        Step(role="planner", output="break the sum into tens and ones"),
        Step(role="solver", output="7 + 5 = 12", label=0),
        Step(role="checker", output="confirmed. ANSWER: 12", label=0),
    ),
    gt_answer="12",
)

line = serialize_trajectory(trajectory)
print("canonical JSONL line:")
print(" ", line.decode().strip())
assert parse_trajectory(line) == trajectory
print("roundtrip parse(serialize(t)) == t holds\n")

# Deterministic split: same seed, same partition. The shuffle hashes ids, so
# it is stable across machines and library versions.
corpus = make_anomaly_corpus(20, seed=0, T=6)
split = split_dataset(corpus, ratio=0.2, seed=7)
print(f"split 20 trajectories at ratio 0.2 -> train {len(split.train)}, "
      f"test {len(split.test)}")
print("train ids:", [t.id for t in split.train], "\n")

# Where do labeled errors sit, relative to trajectory length?
counts = error_position_histogram(corpus, bins=5)
print("error-position histogram (5 bins over relative position):")
for i, count in enumerate(counts):
    lo, hi = i / 5, (i + 1) / 5
    print(f"  [{lo:.1f}, {hi:.1f}): {'#' * count} {count}")
