import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sqlgen.core import (Trajectory, Vocab, decode, dump_dataset, encode, load_dataset,
                         load_task, pad_batch, task_to_json, validate_trajectory)
from sqlgen.tasks import ab_task, lookup_task

ABE = Vocab.from_tokens(["a", "b"], eos="<eos>")


def test_encode_examples():
    assert encode(["a", "b"], ABE) == [0, 1]
    assert encode([], ABE) == []
    with pytest.raises(KeyError, match="unknown token z"):
        encode(["z"], ABE)


@given(st.lists(st.sampled_from(["a", "b", "<eos>"]), max_size=12))
def test_roundtrip(tokens):
    assert decode(encode(tokens, ABE), ABE) == tokens


def test_vocab_invariants():
    with pytest.raises(ValueError):
        Vocab(("a", "a"), None)
    with pytest.raises(ValueError):
        Vocab(("a",), None)
    with pytest.raises(ValueError):
        Vocab(("a", "b"), 2)
    assert ABE.eos_id == 2 and ABE.size == 3 and ABE.pad_id == 3


def test_pad_batch_example():
    b = pad_batch([Trajectory([0], 1.0), Trajectory([0, 1], 0.0)], pad_id=9)
    assert b.token_matrix.tolist() == [[0, 9], [0, 1]]
    assert b.mask.tolist() == [[1, 0], [1, 1]]
    assert b.rewards.tolist() == [1.0, 0.0]


def test_pad_batch_edges():
    single = pad_batch([Trajectory([0, 1, 1], 2.0)], 9)
    assert single.mask.tolist() == [[1, 1, 1]]
    equal = pad_batch([Trajectory([0, 1]), Trajectory([1, 0])], 9)
    assert (equal.token_matrix != 9).all()
    with pytest.raises(ValueError):
        pad_batch([], 9)


@given(st.lists(st.lists(st.integers(0, 2), min_size=1, max_size=6), min_size=1, max_size=5))
def test_pad_batch_mask_matches_lengths(rows):
    b = pad_batch([Trajectory(r) for r in rows], 3)
    assert b.lengths.tolist() == [len(r) for r in rows]
    for i, r in enumerate(rows):
        assert b.token_matrix[i, : len(r)].tolist() == r
        assert (b.token_matrix[i, len(r):] == 3).all()


def test_validate_trajectory():
    task = lookup_task()  # x, y, <eos>; t_max 3
    assert validate_trajectory(Trajectory([0, 2]), task) is None
    assert validate_trajectory(Trajectory([2, 0]), task) == "eos not final"
    assert validate_trajectory(Trajectory([0, 0, 0, 0]), task) == "exceeds horizon"
    assert "outside vocabulary" in validate_trajectory(Trajectory([5]), task)
    assert validate_trajectory(Trajectory([0], float("nan")), task) == "non-finite reward"


def test_terminal_rule():
    task = lookup_task()
    assert task.is_terminal((0, 2)) and task.is_terminal((0, 0, 0))
    assert not task.is_terminal((0, 1))
    assert task.content((0, 1, 2)) == (0, 1)


def test_task_and_dataset_files(tmp_path):
    task = ab_task()
    path = tmp_path / "task.json"
    path.write_text(json.dumps(task_to_json(task)))
    again = load_task(path)
    assert again.vocab == task.vocab and again.t_max == 2
    data = tmp_path / "d.jsonl"
    data.write_text('{"tokens": ["a", "b"]}\n{"tokens": ["b", "b"], "reward": -3}\n')
    rows = load_dataset(data, again)
    assert [r.terminal_reward for r in rows] == [1.0, -3.0]
    dump_dataset(rows, again.vocab, tmp_path / "out.jsonl")
    assert load_dataset(tmp_path / "out.jsonl", again) == rows
    with_data = load_task(path, dataset_path=data)
    assert len(with_data.dataset) == 2


def test_dataset_longer_than_horizon_rejected(tmp_path):
    data = tmp_path / "d.jsonl"
    data.write_text('{"tokens": ["a", "b", "a"]}\n')
    with pytest.raises(ValueError):
        ab_task().with_dataset(load_dataset(data, ab_task()))


def test_batch_with_padding_keeps_values():
    b = pad_batch([Trajectory([0]), Trajectory([1, 1])], 2)
    wide = b.with_padding(3, 2)
    assert wide.token_matrix.shape == (2, 5)
    np.testing.assert_array_equal(wide.lengths, b.lengths)
