import math

import numpy as np
import pytest

from masc.correction import ScriptedPolicy
from masc.detector import BackboneSpec
from masc.embedding import EmbedderSpec
from masc.errors import ConfigError, DataError
from masc.experiment import (
    ExperimentConfig,
    MascSettings,
    batch_experiment,
    train_suite_detector,
)
from masc.fixtures import (
    fixture_agents,
    make_fixture,
    make_fixture_suite,
    oracle_corrector,
    run_fixture,
)
from masc.simulator import (
    AgentSpec,
    FaultSpec,
    MascHook,
    Topology,
    edges,
    extract_answer,
    inject_fault,
    neighbors,
    resolve_fault,
    run_trajectory,
    schedule,
)
from masc.trace import serialize_trajectory


class TestTopology:
    def test_chain_schedule(self):
        assert schedule(Topology("chain", 3)) == [0, 1, 2]

    def test_complete_two_agents_two_rounds(self):
        assert schedule(Topology("complete", 2, rounds=2)) == [0, 1, 0, 1]

    def test_chain_edges_are_path(self):
        assert edges(Topology("chain", 4)) == frozenset(
            {frozenset({0, 1}), frozenset({1, 2}), frozenset({2, 3})}
        )

    def test_complete_edges(self):
        assert len(edges(Topology("complete", 4))) == 6

    def test_random_graph_deterministic_and_connected(self):
        a = edges(Topology("random", 5, edge_seed=3))
        b = edges(Topology("random", 5, edge_seed=3))
        assert a == b
        # connectivity: BFS reaches everyone
        reach = {0}
        frontier = [0]
        adj = {i: set() for i in range(5)}
        for e in a:
            x, y = tuple(e)
            adj[x].add(y)
            adj[y].add(x)
        while frontier:
            node = frontier.pop()
            for n in adj[node]:
                if n not in reach:
                    reach.add(n)
                    frontier.append(n)
        assert reach == set(range(5))

    def test_random_graphs_vary_with_seed(self):
        assert any(
            edges(Topology("random", 5, edge_seed=s))
            != edges(Topology("random", 5, edge_seed=s + 100))
            for s in range(5)
        )

    def test_neighbors(self):
        topo = Topology("chain", 3)
        assert neighbors(topo, 0) == {1}
        assert neighbors(topo, 1) == {0, 2}

    def test_invalid_kind(self):
        with pytest.raises(ConfigError):
            Topology("ring", 3)


class TestInjectFault:
    def test_misleading_template_increments_answer(self):
        assert inject_fault("the answer is 12", "misleading_template") == "the answer is 13"

    def test_misleading_template_rewrites_all_occurrences(self):
        out = inject_fault("= 36; claim 36", "misleading_template")
        assert out == "= 37; claim 37"

    def test_misleading_without_numbers_still_changes(self):
        text = "no numerals here"
        out = inject_fault(text, "misleading_template")
        assert out != text

    def test_scramble_deterministic(self):
        text = "alpha beta gamma delta epsilon"
        assert inject_fault(text, "scramble", seed=5) == inject_fault(text, "scramble", seed=5)

    def test_corruption_never_returns_original(self):
        texts = ["single", "two words", "a a a a", "the answer is 12"]
        for text in texts:
            for corruption in ("misleading_template", "scramble"):
                assert inject_fault(text, corruption, seed=1) != text

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            inject_fault("", "scramble")


class TestResolveFault:
    def test_fixed_step(self):
        agent, t = resolve_fault(FaultSpec(step_selector=2), [0, 1, 2], 3)
        assert (agent, t) == (1, 2)

    def test_target_agent_uniform(self):
        agent, t = resolve_fault(
            FaultSpec(target_agent=1, step_selector="uniform", seed=4), [0, 1, 2], 3
        )
        assert agent == 1
        assert t == 2

    def test_early_selector(self):
        order = [0, 1, 2] * 4  # 12 steps; early = first ~20%
        agent, t = resolve_fault(
            FaultSpec(target_agent=0, step_selector="early", seed=0), order, 3
        )
        assert agent == 0
        assert (t - 1) / len(order) < 0.2

    def test_random_agent_is_seed_deterministic(self):
        picks = {
            resolve_fault(FaultSpec(target_agent="random", seed=s), [0, 1, 2], 3)
            for s in range(10)
        }
        assert len(picks) > 1
        assert resolve_fault(
            FaultSpec(target_agent="random", seed=3), [0, 1, 2], 3
        ) == resolve_fault(FaultSpec(target_agent="random", seed=3), [0, 1, 2], 3)


FIXTURE = make_fixture(7, seed=1)
CHAIN = Topology("chain", 3)


class TestRunTrajectory:
    def test_clean_run_is_correct(self):
        report = run_fixture(FIXTURE, CHAIN)
        assert report.task_correct is True
        assert len(report.trajectory.steps) == 3
        assert extract_answer(report.trajectory.steps[-1].output) == str(FIXTURE.expected)

    def test_clean_suite_all_correct(self):
        for fixture in make_fixture_suite(20, seed=2):
            assert run_fixture(fixture, CHAIN).task_correct is True

    def test_turn_based_contract(self):
        report = run_fixture(FIXTURE, Topology("complete", 3, rounds=2))
        assert len(report.trajectory.steps) == 6

    def test_determinism_bit_identical(self):
        a = run_fixture(FIXTURE, CHAIN, fault=FaultSpec(step_selector=2, seed=9))
        b = run_fixture(FIXTURE, CHAIN, fault=FaultSpec(step_selector=2, seed=9))
        assert serialize_trajectory(a.trajectory) == serialize_trajectory(b.trajectory)

    def test_fault_on_solver_breaks_answer(self):
        report = run_fixture(FIXTURE, CHAIN, fault=FaultSpec(target_agent=1, seed=0))
        assert report.task_correct is False
        assert report.fault_agent == 1
        assert report.fault_step == 2

    def test_fault_locality_single_step_differs_at_injection(self):
        clean = run_fixture(FIXTURE, CHAIN)
        faulted = run_fixture(FIXTURE, CHAIN, fault=FaultSpec(target_agent=1, seed=0))
        t_fault = faulted.fault_step
        for t, (a, b) in enumerate(
            zip(clean.trajectory.steps, faulted.trajectory.steps), start=1
        ):
            if t < t_fault:
                assert a.output == b.output
            elif t == t_fault:
                assert a.output != b.output

    def test_checker_recomputes_when_solver_hidden(self):
        # star topology centered on agent 0: checker cannot see the solver
        topo = Topology("random", 3, edge_seed=_star_seed())
        report = run_fixture(FIXTURE, topo, fault=FaultSpec(target_agent=1, seed=0))
        assert "no claim visible" in report.trajectory.steps[-1].output
        assert report.task_correct is True  # fault not critical in this graph

    def test_agents_must_match_topology(self):
        with pytest.raises(ConfigError):
            run_trajectory(fixture_agents()[:2], CHAIN, "query")

    def test_remote_agent_failure_aborts_with_partial_report(self):
        agents = fixture_agents()
        broken = AgentSpec(
            role="solver", policy="remote_chat",
            endpoint="http://127.0.0.1:1", model_name="m",
        )
        report = run_trajectory(
            [agents[0], broken, agents[2]], CHAIN, FIXTURE.query,
            expected_answer=str(FIXTURE.expected),
        )
        assert report.aborted
        assert report.error
        assert len(report.trajectory.steps) == 1  # decomposer only
        assert report.task_correct is None


def _star_seed():
    # find a seed whose 3-node connected graph is exactly {0-1, 0-2}
    target = frozenset({frozenset({0, 1}), frozenset({0, 2})})
    for seed in range(200):
        if edges(Topology("random", 3, edge_seed=seed)) == target:
            return seed
    raise RuntimeError("no star seed found")


@pytest.fixture(scope="module")
def suite_detector():
    config = ExperimentConfig(
        n_fixtures=12, seed=5,
        masc=MascSettings(epochs=80, lr=3e-3, d_e=48, d_h=160),
    )
    fixtures = make_fixture_suite(12, seed=5)
    clean = [run_fixture(f, CHAIN) for f in fixtures]
    model, calibration = train_suite_detector(config, [r.trajectory for r in clean])
    return fixtures, clean, model, calibration


class TestMascInLoop:
    def test_zero_intervention_equivalence_at_infinite_delta(self, suite_detector):
        fixtures, clean, model, calibration = suite_detector
        fixture, clean_report = fixtures[0], clean[0]
        hook = MascHook(
            model=model, alpha=1.0, beta=1.0, delta=math.inf,
            policy=oracle_corrector([s.output for s in clean_report.trajectory.steps]),
        )
        fault = FaultSpec(target_agent=1, seed=3)
        with_masc = run_fixture(fixture, CHAIN, fault=fault, masc=hook)
        without = run_fixture(fixture, CHAIN, fault=fault)
        assert serialize_trajectory(with_masc.trajectory) == serialize_trajectory(
            without.trajectory
        )
        assert with_masc.interventions == 0
        assert hook.policy.calls == 0

    def test_oracle_correction_restores_answers(self, suite_detector):
        fixtures, clean, model, calibration = suite_detector
        restored = 0
        for fixture, clean_report in zip(fixtures, clean):
            hook = MascHook(
                model=model, alpha=1.0, beta=1.0, delta=calibration.delta,
                policy=oracle_corrector(
                    [s.output for s in clean_report.trajectory.steps]
                ),
            )
            report = run_fixture(
                fixture, CHAIN, fault=FaultSpec(target_agent=1, seed=11), masc=hook
            )
            restored += bool(report.task_correct)
        assert restored >= 0.8 * len(fixtures)

    def test_history_substitution_after_intervention(self, suite_detector):
        fixtures, clean, model, calibration = suite_detector
        fixture, clean_report = fixtures[1], clean[1]
        hook = MascHook(
            model=model, alpha=1.0, beta=1.0, delta=calibration.delta,
            policy=oracle_corrector([s.output for s in clean_report.trajectory.steps]),
        )
        report = run_fixture(
            fixture, CHAIN, fault=FaultSpec(target_agent=1, seed=11), masc=hook
        )
        if report.interventions:
            corrected = report.trajectory.steps[1].output
            assert corrected == clean_report.trajectory.steps[1].output
            final = report.trajectory.steps[-1].output
            assert extract_answer(final) == str(fixture.expected)

    def test_interventions_bounded_by_flags(self, suite_detector):
        fixtures, clean, model, calibration = suite_detector
        hook = MascHook(
            model=model, alpha=1.0, beta=1.0, delta=calibration.delta,
            policy=oracle_corrector([s.output for s in clean[2].trajectory.steps]),
        )
        report = run_fixture(
            fixtures[2], CHAIN, fault=FaultSpec(target_agent=1, seed=2), masc=hook
        )
        assert report.interventions <= report.flagged
        assert hook.policy.calls == report.flagged


class TestBatchExperiment:
    def test_small_sweep_structure(self):
        config = ExperimentConfig(
            topologies=("chain",),
            n_fixtures=6,
            seed=9,
            masc=MascSettings(epochs=60, lr=3e-3, d_e=48, d_h=128),
        )
        report = batch_experiment(config)
        assert {c.key() for c in report.cells} == {
            "chain/clean/off", "chain/faulted/off", "chain/clean/masc",
            "chain/faulted/masc",
        }
        for cell in report.cells:
            assert cell.n_runs == 6
        clean = report.cell("chain", False, False).accuracy
        faulted = report.cell("chain", True, False).accuracy
        recovered = report.cell("chain", True, True).accuracy
        assert clean >= faulted
        assert recovered >= faulted
        assert "fault_drop" in report.deltas["chain"]
        csv_text = report.to_csv()
        assert csv_text.startswith("topology,condition,masc,accuracy")
        assert len(csv_text.strip().split("\n")) == 5

    def test_jobs_parallelism_matches_serial(self):
        base = ExperimentConfig(
            topologies=("chain",), n_fixtures=5, seed=3, with_masc_cells=False
        )
        parallel = ExperimentConfig(
            topologies=("chain",), n_fixtures=5, seed=3, with_masc_cells=False, jobs=4
        )
        a, b = batch_experiment(base), batch_experiment(parallel)
        assert [c.accuracy for c in a.cells] == [c.accuracy for c in b.cells]
        sa = {k: [serialize_trajectory(t) for t in v] for k, v in a.runs.items()}
        sb = {k: [serialize_trajectory(t) for t in v] for k, v in b.runs.items()}
        assert sa == sb
