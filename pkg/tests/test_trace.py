import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from masc.errors import DataError, TraceParseError, TraceValidationError
from masc.trace import (
    DatasetSplit,
    Step,
    Trajectory,
    error_position_histogram,
    is_early_step,
    load_trajectories,
    parse_trajectory,
    save_trajectories,
    serialize_trajectory,
    split_dataset,
)


def make_traj(i, n_steps=3, label_at=None):
    steps = tuple(
        Step(role=f"agent-{t % 2}", output=f"out {i} {t}",
             label=(1 if t == label_at else 0) if label_at is not None else None)
        for t in range(1, n_steps + 1)
    )
    return Trajectory(id=f"traj-{i}", query=f"query {i}", steps=steps)


class TestParse:
    def test_minimal_line(self):
        t = parse_trajectory(b'{"id":"t1","query":"q","steps":[{"role":"solver","output":"42"}]}')
        assert len(t) == 1
        assert t.steps[0].role == "solver"
        assert t.steps[0].label is None
        assert t.gt_answer is None

    def test_empty_steps_rejected(self):
        with pytest.raises(TraceValidationError, match="empty steps"):
            parse_trajectory(b'{"id":"t2","query":"q","steps":[]}')

    def test_malformed_json_reports_byte_offset(self):
        with pytest.raises(TraceParseError) as err:
            parse_trajectory(b'{"id": "x", "query": }')
        assert err.value.byte_offset is not None
        assert "byte offset" in str(err.value)

    def test_key_order_does_not_matter(self):
        a = parse_trajectory(b'{"id":"x","query":"q","steps":[{"role":"r","output":"o"}]}')
        b = parse_trajectory(b'{"steps":[{"output":"o","role":"r"}],"query":"q","id":"x"}')
        assert a == b

    def test_label_must_be_binary(self):
        with pytest.raises(TraceValidationError):
            parse_trajectory(
                b'{"id":"x","query":"q","steps":[{"role":"r","output":"o","label":2}]}'
            )

    def test_unknown_keys_strict_vs_lenient(self, caplog):
        line = b'{"id":"x","query":"q","bonus":1,"steps":[{"role":"r","output":"o"}]}'
        with pytest.raises(TraceValidationError, match="unknown"):
            parse_trajectory(line, strict=True)
        with caplog.at_level(logging.WARNING):
            t = parse_trajectory(line, strict=False)
        assert t.id == "x"
        assert any("unknown" in r.message for r in caplog.records)

    def test_missing_required_key(self):
        with pytest.raises(TraceValidationError, match="missing required"):
            parse_trajectory(b'{"query":"q","steps":[{"role":"r","output":"o"}]}')


class TestSerialize:
    def test_single_line_with_trailing_newline(self):
        blob = serialize_trajectory(make_traj(0, n_steps=1))
        assert blob.endswith(b"\n")
        assert blob.count(b"\n") == 1

    def test_deterministic_bytes(self):
        t = make_traj(1)
        assert serialize_trajectory(t) == serialize_trajectory(t)

    def test_canonical_key_order(self):
        keys = list(json.loads(serialize_trajectory(make_traj(2))).keys())
        assert keys == ["id", "query", "gt_answer", "steps"]


step_texts = st.text(min_size=1, max_size=20)


@st.composite
def trajectories(draw):
    steps = tuple(
        Step(
            role=draw(step_texts),
            output=draw(step_texts),
            label=draw(st.sampled_from([None, 0, 1])),
        )
        for _ in range(draw(st.integers(1, 5)))
    )
    return Trajectory(
        id=draw(step_texts),
        query=draw(step_texts),
        steps=steps,
        gt_answer=draw(st.one_of(st.none(), step_texts)),
    )


@given(trajectories())
@settings(max_examples=200, deadline=None)
def test_roundtrip_property(t):
    assert parse_trajectory(serialize_trajectory(t)) == t


@given(trajectories())
@settings(max_examples=50, deadline=None)
def test_serialize_is_canonical_form(t):
    # re-serializing a parsed line reproduces the canonical bytes exactly
    blob = serialize_trajectory(t)
    assert serialize_trajectory(parse_trajectory(blob)) == blob


class TestFiles:
    def test_save_load_roundtrip(self, tmp_path):
        trajectories = [make_traj(i) for i in range(5)]
        path = tmp_path / "traces.jsonl"
        save_trajectories(str(path), trajectories)
        assert load_trajectories(str(path)) == trajectories

    def test_load_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_bytes(serialize_trajectory(make_traj(0)) + b"{broken\n")
        with pytest.raises(DataError, match=":2:"):
            load_trajectories(str(path))

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "gaps.jsonl"
        path.write_bytes(serialize_trajectory(make_traj(0)) + b"\n" +
                         serialize_trajectory(make_traj(1)))
        assert len(load_trajectories(str(path))) == 2


class TestSplit:
    def test_paper_ratio_20_80(self):
        split = split_dataset([make_traj(i) for i in range(10)], ratio=0.2, seed=7)
        assert len(split.train) == 2
        assert len(split.test) == 8

    def test_two_items_half(self):
        split = split_dataset([make_traj(i) for i in range(2)], ratio=0.5, seed=0)
        assert len(split.train) == 1
        assert len(split.test) == 1

    def test_same_seed_same_split(self):
        data = [make_traj(i) for i in range(20)]
        a = split_dataset(data, ratio=0.3, seed=42)
        b = split_dataset(data, ratio=0.3, seed=42)
        assert [t.id for t in a.train] == [t.id for t in b.train]

    def test_partition_property(self):
        data = [make_traj(i) for i in range(17)]
        split = split_dataset(data, ratio=0.25, seed=5)
        train_ids = {t.id for t in split.train}
        test_ids = {t.id for t in split.test}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {t.id for t in data}
        assert len(split.train) == round(0.25 * 17)

    def test_different_seeds_differ(self):
        data = [make_traj(i) for i in range(30)]
        a = split_dataset(data, ratio=0.5, seed=1)
        b = split_dataset(data, ratio=0.5, seed=2)
        assert [t.id for t in a.train] != [t.id for t in b.train]

    def test_too_few_items(self):
        with pytest.raises(DataError, match="cannot split"):
            split_dataset([make_traj(0)], ratio=0.5, seed=0)

    def test_bad_ratio(self):
        with pytest.raises(DataError):
            split_dataset([make_traj(i) for i in range(4)], ratio=1.0, seed=0)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(TraceValidationError, match="duplicate"):
            split_dataset([make_traj(0), make_traj(0)], ratio=0.5, seed=0)


class TestErrorHistogram:
    def test_first_step_lands_in_bin_zero(self):
        t = make_traj(0, n_steps=10, label_at=1)
        assert error_position_histogram([t], bins=5) == [1, 0, 0, 0, 0]

    def test_last_step_lands_in_last_bin(self):
        t = make_traj(0, n_steps=10, label_at=10)
        assert error_position_histogram([t], bins=5) == [0, 0, 0, 0, 1]

    def test_counts_sum_to_labeled_steps(self):
        data = [make_traj(i, n_steps=6, label_at=(i % 6) + 1) for i in range(30)]
        counts = error_position_histogram(data, bins=4)
        assert sum(counts) == 30

    def test_no_labels_is_an_error(self):
        with pytest.raises(DataError, match="no labels"):
            error_position_histogram([make_traj(0)], bins=3)

    def test_uniform_positions_give_flat_histogram(self):
        # oracle: generate 1000 errors placed uniformly; chi^2 GOF should not
        # reject flatness at alpha=0.01
        rng = np.random.RandomState(123)
        T, bins = 20, 5
        data = [
            make_traj(i, n_steps=T, label_at=int(rng.randint(1, T + 1)))
            for i in range(1000)
        ]
        counts = error_position_histogram(data, bins=bins)
        _, p_value = stats.chisquare(counts)
        assert p_value > 0.01


def test_early_step_convention_matches_histogram_bin_zero():
    T, bins = 6, 5
    for t in range(1, T + 1):
        in_bin_zero = int((t - 1) / T * bins) == 0
        assert is_early_step(t, T) == in_bin_zero
