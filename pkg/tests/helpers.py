"""Small fixtures shared by the test modules."""
import numpy as np

from sqlgen import diffengine as F
from sqlgen.core import TaskSpec, Vocab
from sqlgen.tasks import ab_task


def all_prefixes(task):
    """Every non-terminal prefix, root first."""
    out = []

    def visit(prefix):
        out.append(prefix)
        for a in range(task.vocab.size):
            child = prefix + (a,)
            if not task.is_terminal(child):
                visit(child)

    visit(())
    return out


def all_episodes(task):
    """Every complete episode of the task."""
    out = []
    for prefix in all_prefixes(task):
        for a in range(task.vocab.size):
            child = prefix + (a,)
            if task.is_terminal(child):
                out.append(child)
    return out


class TableModel:
    """One free Q-row per prefix; stands in for QModel in loss tests."""

    def __init__(self, task):
        self.vocab_size = task.vocab.size
        self.t_max = task.t_max
        self.index = {p: i for i, p in enumerate(all_prefixes(task))}

    def params_from(self, table):
        rows = np.zeros((len(self.index), self.vocab_size))
        for p, i in self.index.items():
            rows[i] = table[p]
        return {"q": rows}

    def q_rows_batch(self, params, token_matrix):
        b, length = token_matrix.shape
        idx = np.zeros((b, length), dtype=np.int64)
        for r in range(b):
            for t in range(length):
                prefix = tuple(int(x) for x in token_matrix[r, :t])
                idx[r, t] = self.index.get(prefix, 0)
        return F.rows(params["q"], idx)


def two_token_task():
    # "a", "b" with b ending the episode; horizon 2
    return TaskSpec(Vocab(("a", "b"), 1), 2, ab_task().reward_spec)


def tables(q_root, q_a=(0.0, 0.0)):
    return {(): np.array(q_root, float), (0,): np.array(q_a, float)}
