"""Token alphabet, trajectories, padded batches and task definitions."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class Source(str, Enum):
    ON_POLICY = "on_policy"
    OFF_POLICY = "off_policy"


@dataclass(frozen=True)
class Vocab:
    """Ordered token alphabet.

    ``eos_id`` may be ``None`` for tasks whose episodes only end at the
    horizon cap.
    """

    tokens: tuple
    eos_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if self.eos_id is not None and not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_tokens(cls, tokens: Sequence[str], eos: Optional[str] = None) -> "Vocab":
        tokens = tuple(tokens)
        if eos is None:
            return cls(tokens, None)
        if eos not in tokens:
            tokens = tokens + (eos,)
        return cls(tokens, tokens.index(eos))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> Optional[str]:
        return None if self.eos_id is None else self.tokens[self.eos_id]

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"unknown token {token}") from None


def encode(text_tokens: Sequence[str], vocab: Vocab) -> list:
    return [vocab.id_of(t) for t in text_tokens]


def decode(ids: Sequence[int], vocab: Vocab) -> list:
    return [vocab.tokens[i] for i in ids]


@dataclass(frozen=True)
class Trajectory:
    token_ids: tuple
    terminal_reward: float = 0.0
    source: Source = Source.OFF_POLICY

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class Batch:
    token_matrix: np.ndarray  # (B, L) int, PAD where mask == 0
    mask: np.ndarray  # (B, L) float 0/1
    rewards: np.ndarray  # (B,)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    def __len__(self):
        return self.token_matrix.shape[0]

    def with_padding(self, extra: int, pad_id: int) -> "Batch":
        """Append ``extra`` all-padding columns."""
        b = self.token_matrix.shape[0]
        tokens = np.concatenate([self.token_matrix, np.full((b, extra), pad_id)], axis=1)
        mask = np.concatenate([self.mask, np.zeros((b, extra))], axis=1)
        return Batch(tokens, mask, self.rewards.copy())


def pad_batch(trajs: Sequence[Trajectory], pad_id: int) -> Batch:
    if not trajs:
        raise ValueError("cannot pad an empty list of trajectories")
    width = max(len(t) for t in trajs)
    if width == 0:
        raise ValueError("trajectories must contain at least one token")
    tokens = np.full((len(trajs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(trajs), width))
    for row, t in enumerate(trajs):
        tokens[row, : len(t)] = t.token_ids
        mask[row, : len(t)] = 1.0
    rewards = np.array([t.terminal_reward for t in trajs], dtype=float)
    return Batch(tokens, mask, rewards)


@dataclass(frozen=True)
class TaskSpec:
    vocab: Vocab
    t_max: int
    reward_spec: "RewardSpec"  # noqa: F821
    dataset: Optional[tuple] = None
    name: str = "task"

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.dataset is not None:
            object.__setattr__(self, "dataset", tuple(self.dataset))
            for traj in self.dataset:
                problem = validate_trajectory(traj, self)
                if problem is not None:
                    raise ValueError(f"invalid dataset trajectory {traj.token_ids}: {problem}")

    def is_terminal(self, prefix: Sequence[int]) -> bool:
        """True once a prefix is a finished episode (eos emitted or horizon hit)."""
        if len(prefix) >= self.t_max:
            return True
        return bool(prefix) and self.vocab.eos_id is not None and prefix[-1] == self.vocab.eos_id

    def content(self, ids: Sequence[int]) -> tuple:
        """Token ids with a trailing eos removed; what reward components score."""
        ids = tuple(ids)
        if ids and self.vocab.eos_id is not None and ids[-1] == self.vocab.eos_id:
            return ids[:-1]
        return ids

    def with_dataset(self, dataset) -> "TaskSpec":
        return TaskSpec(self.vocab, self.t_max, self.reward_spec, dataset, self.name)


def validate_trajectory(traj: Trajectory, task: TaskSpec) -> Optional[str]:
    """Return ``None`` when valid, otherwise a short description of the violation."""
    ids = traj.token_ids
    size = task.vocab.size
    for i in ids:
        if not 0 <= i < size:
            return f"token id {i} outside vocabulary"
    eos = task.vocab.eos_id
    if eos is not None and eos in ids[:-1]:
        return "eos not final"
    if len(ids) > task.t_max:
        return "exceeds horizon"
    if not np.isfinite(traj.terminal_reward):
        return "non-finite reward"
    return None


# -- file formats -------------------------------------------------------------


def load_task(path, dataset_path=None) -> TaskSpec:
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    return task_from_json(raw, base_dir=path.parent, dataset_path=dataset_path)


def task_from_json(raw: dict, base_dir=None, dataset_path=None) -> TaskSpec:
    from .rewards import reward_spec_from_json

    for key in ("vocab", "t_max", "reward"):
        if key not in raw:
            raise KeyError(f"task definition missing key {key!r}")
    vocab = Vocab.from_tokens(raw["vocab"], raw.get("eos"))
    spec = reward_spec_from_json(raw["reward"], vocab)
    task = TaskSpec(vocab, int(raw["t_max"]), spec, None, raw.get("name", "task"))
    if dataset_path is None and raw.get("dataset"):
        dataset_path = Path(base_dir or ".") / raw["dataset"]
    if dataset_path is not None:
        task = task.with_dataset(load_dataset(dataset_path, task))
    return task


def task_to_json(task: TaskSpec) -> dict:
    from .rewards import reward_spec_to_json

    out = {"name": task.name, "vocab": list(task.vocab.tokens), "t_max": task.t_max,
           "reward": reward_spec_to_json(task.reward_spec, task.vocab)}
    if task.vocab.eos is not None:
        out["eos"] = task.vocab.eos
    return out


def load_dataset(path, task: TaskSpec) -> list:
    """Read JSONL trajectories; a missing ``reward`` is recomputed from the task."""
    from .rewards import reward

    trajs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                ids = encode(row["tokens"], task.vocab)
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.args[0]}") from None
            r = row.get("reward")
            if r is None:
                r = reward(task.reward_spec, task.content(ids))
            trajs.append(Trajectory(ids, float(r), Source.OFF_POLICY))
    return trajs


def dump_dataset(trajs, vocab: Vocab, path) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(json.dumps({"tokens": decode(t.token_ids, vocab),
                                 "reward": t.terminal_reward}) + "\n")
