"""Turn-based multi-agent simulator with fault injection and in-loop detection.

Agents act one per time step following a deterministic schedule derived from
the topology: a chain follows the path order; complete and random graphs
iterate agents in index order, ``rounds`` full passes. Each agent sees the
query plus the messages emitted by itself and its graph neighbors.

A fault corrupts exactly one (agent, step) per run. With detection enabled,
every produced output is scored against the shared history before it is
committed; flagged outputs go through the correction agent and the corrected
text is what lands in the history that later agents (and the detector) see.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .correction import CorrectionRequest, apply_correction
from .detector import AnomalyVerdict, DetectorModel, detect
from .embedding import embed_step, embed_text
from .errors import ConfigError, DataError, TransportError
from .trace import Step, Trajectory, is_early_step

logger = logging.getLogger(__name__)

# (query, visible history as (role, output) pairs, 1-based step index) -> output
AgentFn = Callable[[str, list[tuple[str, str]], int], str]

ANSWER_PATTERN = re.compile(r"ANSWER:\s*(-?\d+)")
_NUMBER = re.compile(r"-?\d+")


@dataclass(frozen=True)
class AgentSpec:
    role: str
    policy: str = "scripted_template"  # "scripted_template" | "remote_chat"
    template: AgentFn | None = None
    endpoint: str | None = None
    model_name: str | None = None

    def __post_init__(self):
        if not self.role:
            raise ConfigError("agent role must be non-empty")
        if self.policy not in ("scripted_template", "remote_chat"):
            raise ConfigError(f"unknown agent policy {self.policy!r}")
        if self.policy == "scripted_template" and self.template is None:
            raise ConfigError("scripted_template agent requires a template")
        if self.policy == "remote_chat" and (not self.endpoint or not self.model_name):
            raise ConfigError("remote_chat agent requires endpoint and model_name")


@dataclass(frozen=True)
class Topology:
    kind: str  # "chain" | "complete" | "random"
    n_agents: int
    edge_seed: int = 0
    rounds: int = 1

    def __post_init__(self):
        if self.kind not in ("chain", "complete", "random"):
            raise ConfigError(f"unknown topology kind {self.kind!r}")
        if self.n_agents < 1 or self.rounds < 1:
            raise ConfigError("topology needs n_agents >= 1 and rounds >= 1")


@dataclass(frozen=True)
class FaultSpec:
    """Exactly one corrupted (agent, step) per run."""

    target_agent: int | str = "random"  # agent index or "random"
    step_selector: int | str = "uniform"  # fixed t | "uniform" | "early"
    corruption: str = "misleading_template"  # | "scramble"
    seed: int = 0

    def __post_init__(self):
        if self.corruption not in ("misleading_template", "scramble"):
            raise ConfigError(f"unknown corruption {self.corruption!r}")


@dataclass
class MascHook:
    """Detector plus correction policy threaded through a run."""

    model: DetectorModel
    alpha: float
    beta: float
    delta: float
    policy: object  # anything with reply(req, prompt) -> str


@dataclass
class RunReport:
    trajectory: Trajectory | None
    verdicts: list[AnomalyVerdict] = field(default_factory=list)
    flagged: int = 0
    interventions: int = 0
    corrections_failed: int = 0
    task_correct: bool | None = None
    expected_answer: str | None = None
    fault_step: int | None = None
    fault_agent: int | None = None
    aborted: bool = False
    error: str | None = None
    wall_time: float = 0.0


def edges(topology: Topology) -> frozenset[frozenset[int]]:
    """Undirected edge set; random graphs redraw (seeded) until connected."""
    n = topology.n_agents
    if topology.kind == "chain":
        return frozenset(frozenset((i, i + 1)) for i in range(n - 1))
    if topology.kind == "complete":
        return frozenset(
            frozenset((i, j)) for i in range(n) for j in range(i + 1, n)
        )
    rng = random.Random(topology.edge_seed)
    while True:
        drawn = frozenset(
            frozenset((i, j))
            for i in range(n)
            for j in range(i + 1, n)
            if rng.random() < 0.5
        )
        if _connected(n, drawn):
            return drawn


def _connected(n: int, edge_set: frozenset[frozenset[int]]) -> bool:
    if n == 1:
        return True
    adjacency: dict[int, set[int]] = {i: set() for i in range(n)}
    for edge in edge_set:
        a, b = tuple(edge)
        adjacency[a].add(b)
        adjacency[b].add(a)
    seen = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for neighbor in adjacency[node]:
            if neighbor not in seen:
                seen.add(neighbor)
                frontier.append(neighbor)
    return len(seen) == n


def neighbors(topology: Topology, agent: int) -> set[int]:
    return {
        other
        for edge in edges(topology)
        for other in edge
        if agent in edge and other != agent
    }


def schedule(topology: Topology) -> list[int]:
    """Deterministic turn order: agent indices, ``rounds`` full passes."""
    base = list(range(topology.n_agents))
    return base * topology.rounds


def inject_fault(step_output: str, corruption: str, seed: int = 0) -> str:
    """Corrupt one output; the result never equals the input.

    ``misleading_template`` rewrites the answer span: every occurrence of the
    last integer in the text is replaced by that value plus one. ``scramble``
    applies a seeded token permutation.
    """
    if not step_output:
        raise DataError("cannot corrupt empty output")
    if corruption == "misleading_template":
        matches = list(_NUMBER.finditer(step_output))
        if not matches:
            return "misleadingly, " + step_output
        value = matches[-1].group()
        wrong = str(int(value) + 1)
        out = re.sub(rf"(?<![\d-]){re.escape(value)}(?!\d)", wrong, step_output)
        if out == step_output:  # overlapping signs; fall back to append
            out = step_output + " " + wrong
        return out
    tokens = step_output.split()
    rng = random.Random(seed)
    order = list(range(len(tokens)))
    rng.shuffle(order)
    scrambled = [tokens[i] for i in order]
    if scrambled == tokens:
        scrambled = scrambled[1:] + scrambled[:1]
    out = " ".join(scrambled)
    if out == step_output:
        out = step_output + " (scrambled)"
    return out


def resolve_fault(
    fault: FaultSpec, turn_order: list[int], n_agents: int
) -> tuple[int, int]:
    """Pick the one (agent, 1-based step) this fault corrupts."""
    rng = random.Random(fault.seed)
    total = len(turn_order)
    if isinstance(fault.step_selector, int):
        t = fault.step_selector
        if not (1 <= t <= total):
            raise ConfigError(f"fault step {t} outside schedule of length {total}")
        return turn_order[t - 1], t
    if fault.target_agent == "random":
        target = turn_order[int(rng.random() * total) % total]
    else:
        target = int(fault.target_agent)
        if target not in turn_order:
            raise ConfigError(f"fault target agent {target} never acts")
    candidates = [t for t, a in enumerate(turn_order, start=1) if a == target]
    if fault.step_selector == "early":
        early = [t for t in candidates if is_early_step(t, total)]
        candidates = early or candidates[:1]
    pick = candidates[int(rng.random() * len(candidates)) % len(candidates)]
    return target, pick


class RemoteChatAgent:
    """Agent backed by the POST {endpoint}/chat contract."""

    def __init__(self, spec: AgentSpec):
        import requests

        self.spec = spec
        self._session = requests.Session()

    def act(self, query: str, visible: list[tuple[str, str]], t: int) -> str:
        import requests

        transcript = "\n".join(f"[{role}] {output}" for role, output in visible)
        prompt = (
            f"You are {self.spec.role} in a multi-agent collaboration.\n"
            f"Task: {query}\n"
            f"Visible context:\n{transcript if transcript else '(none)'}\n"
            f"Respond with your contribution for step {t}."
        )
        body = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
        }
        url = self.spec.endpoint.rstrip("/") + "/chat"
        try:
            resp = self._session.post(url, json=body, timeout=30.0)
        except requests.RequestException as exc:
            raise TransportError(f"remote agent failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"remote agent failed: HTTP {resp.status_code}")
        return str(resp.json()["content"])


def _agent_callable(spec: AgentSpec) -> AgentFn:
    if spec.policy == "scripted_template":
        return spec.template
    return RemoteChatAgent(spec).act


def extract_answer(text: str) -> str | None:
    match = None
    for match in ANSWER_PATTERN.finditer(text):
        pass
    return match.group(1) if match else None


def run_trajectory(
    agents: list[AgentSpec],
    topology: Topology,
    query: str,
    fault: FaultSpec | None = None,
    masc: MascHook | None = None,
    expected_answer: str | None = None,
    trace_id: str = "run",
) -> RunReport:
    """Execute one full schedule; returns the trajectory and per-step verdicts."""
    if len(agents) != topology.n_agents:
        raise ConfigError("agents list must match topology.n_agents")
    start = time.monotonic()
    turn_order = schedule(topology)
    visibility = {
        i: neighbors(topology, i) | {i} for i in range(topology.n_agents)
    }
    callables = [_agent_callable(spec) for spec in agents]
    report = RunReport(trajectory=None, expected_answer=expected_answer)
    if fault is not None:
        report.fault_agent, report.fault_step = resolve_fault(
            fault, turn_order, topology.n_agents
        )
    history: list[tuple[int, str, str]] = []  # (agent index, role, output)
    step_embs: list[np.ndarray] = []
    q_vec = embed_text(masc.model.embedder, query) if masc is not None else None

    for t, agent_idx in enumerate(turn_order, start=1):
        spec = agents[agent_idx]
        visible = [
            (role, output)
            for emitter, role, output in history
            if emitter in visibility[agent_idx]
        ]
        try:
            output = callables[agent_idx](query, visible, t)
        except TransportError as exc:
            report.aborted = True
            report.error = str(exc)
            break
        if fault is not None and t == report.fault_step:
            output = inject_fault(output, fault.corruption, fault.seed)
        if masc is not None:
            step_embs.append(embed_step(masc.model.embedder, spec.role, output))
            verdict = detect(
                masc.model, q_vec, step_embs, t, masc.alpha, masc.beta, masc.delta
            )
            report.verdicts.append(verdict)
            if verdict.flagged:
                report.flagged += 1
                req = CorrectionRequest(
                    role=spec.role,
                    query=query,
                    history=tuple((role, out) for _, role, out in history),
                    flagged_output=output,
                )
                outcome = apply_correction(masc.policy, verdict, req)
                if outcome.failed:
                    report.corrections_failed += 1
                if outcome.replaced:
                    report.interventions += 1
                    output = outcome.output
                    step_embs[t - 1] = embed_step(
                        masc.model.embedder, spec.role, output
                    )
        history.append((agent_idx, spec.role, output))

    if history:
        report.trajectory = Trajectory(
            id=trace_id,
            query=query,
            steps=tuple(Step(role=role, output=output) for _, role, output in history),
        )
    if not report.aborted and report.trajectory is not None:
        if expected_answer is not None:
            answer = extract_answer(report.trajectory.steps[-1].output)
            report.task_correct = answer == expected_answer
    report.wall_time = time.monotonic() - start
    return report


def run_seed(base_seed: int, run_id: str) -> int:
    """Isolated per-run seed stream."""
    digest = hashlib.sha256(f"{base_seed}:{run_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# -- batch experiments --------------------------------------------------------


@dataclass
class CellResult:
    topology: str
    faulted: bool
    masc_on: bool
    accuracy: float
    n_runs: int
    flagged: int
    interventions: int

    def key(self) -> str:
        return (
            f"{self.topology}/{'faulted' if self.faulted else 'clean'}/"
            f"{'masc' if self.masc_on else 'off'}"
        )


@dataclass
class ExperimentReport:
    cells: list[CellResult]
    deltas: dict[str, dict[str, float]]
    config: dict
    runs: dict[str, list[Trajectory]] = field(default_factory=dict, repr=False)

    def cell(self, topology: str, faulted: bool, masc_on: bool) -> CellResult:
        for c in self.cells:
            if (c.topology, c.faulted, c.masc_on) == (topology, faulted, masc_on):
                return c
        raise KeyError((topology, faulted, masc_on))

    def to_dict(self) -> dict:
        return {
            "cells": {
                c.key(): {
                    "accuracy": c.accuracy,
                    "n_runs": c.n_runs,
                    "flagged": c.flagged,
                    "interventions": c.interventions,
                }
                for c in self.cells
            },
            "deltas": self.deltas,
            "config": self.config,
        }

    def to_csv(self) -> str:
        lines = ["topology,condition,masc,accuracy,n_runs,flagged,interventions"]
        for c in self.cells:
            lines.append(
                f"{c.topology},{'faulted' if c.faulted else 'clean'},"
                f"{'on' if c.masc_on else 'off'},{c.accuracy:.6f},{c.n_runs},"
                f"{c.flagged},{c.interventions}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
