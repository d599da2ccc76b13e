"""Built-in tiny tasks used by the tests, the CLI examples and the acceptance harness."""
from __future__ import annotations

from .core import TaskSpec, Trajectory, encode, task_from_json
from .rewards import reward


def ab_task(scale: float = 1.0) -> TaskSpec:
    """Two tokens, horizon 2, reward 1 only for ``a b``."""
    return task_from_json({
        "name": "ab", "vocab": ["a", "b"], "t_max": 2,
        "reward": {"scale": scale, "components": [
            {"kind": "exact_match", "target": ["a", "b"], "weight": 1.0}]},
    })


def lookup_task() -> TaskSpec:
    """Hand-made landscape with negative rewards and an eos token."""
    return task_from_json({
        "name": "lookup", "vocab": ["x", "y"], "eos": "<eos>", "t_max": 3,
        "reward": {"components": [{
            "kind": "lookup_table", "weight": 1.0, "default": -0.2,
            "table": {"x y": 1.0, "y": -1.0, "x x x": 0.6, "y y": -0.5, "": -1.0,
                      "y x y": 0.8},
        }]},
    })


def bleu_task() -> TaskSpec:
    """Four tokens, horizon 4: bigram BLEU against ``a b c`` minus repetitions."""
    return task_from_json({
        "name": "bleu", "vocab": ["a", "b", "c"], "eos": "<eos>", "t_max": 4,
        "reward": {"scale": 2.0, "components": [
            {"kind": "ngram_bleu", "references": [["a", "b", "c"]], "max_n": 2, "weight": 1.0},
            {"kind": "repetition_penalty", "weight": 0.5},
        ]},
    })


NOISY_ROWS = (
    # (tokens, copies); more than 2/5 of rows carry negative reward
    ("c a b", 10),
    ("a b <eos>", 14),
    ("a b c", 6),
    ("a a <eos>", 10),
    ("b b b", 10),
    ("c c <eos>", 10),
)


def noisy_task() -> TaskSpec:
    """Offline data dominated by mediocre and negative sequences.

    The best sequence ``c a b`` (reward 1) is a minority of the data; the
    dataset mean reward is 1/12.
    """
    task = task_from_json({
        "name": "noisy", "vocab": ["a", "b", "c"], "eos": "<eos>", "t_max": 3,
        "reward": {"components": [{
            "kind": "lookup_table", "weight": 1.0, "default": -0.2,
            "table": {"c a b": 1.0, "a b": 0.5, "a b c": 0.5,
                      "a a": -0.5, "b b b": -0.5, "c c": -0.5},
        }]},
    })
    data = []
    for text, copies in NOISY_ROWS:
        ids = encode(text.split(), task.vocab)
        r = reward(task.reward_spec, task.content(ids))
        data.extend(Trajectory(ids, r) for _ in range(copies))
    return task.with_dataset(data)


def sparse_task(t_max: int = 8, target: str = "a b b a b a a b") -> TaskSpec:
    """Binary alphabet, fixed length, reward only for one exact sequence."""
    return task_from_json({
        "name": f"sparse{t_max}", "vocab": ["a", "b"], "t_max": t_max,
        "reward": {"components": [{"kind": "exact_match", "target": target, "weight": 1.0}]},
    })
