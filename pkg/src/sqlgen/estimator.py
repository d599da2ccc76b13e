"""Scikit-learn style wrapper around the training loop.

``X`` is a list of token sequences (token strings or ids); ``y`` holds their
rewards.  When ``y`` is omitted the task's reward function scores ``X``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Source, TaskSpec, Trajectory, encode, validate_trajectory
from .decoding import greedy_decode, sample_sequences
from .metrics import heldout_nll
from .objectives import LossWeights
from .qmodel import ModelConfig, policy_from_q
from .rewards import filter_dataset_by_reward, reward
from .trainer import TrainConfig, child_rng, run_training


def check_sequences(X, task: TaskSpec) -> list:
    """Convert ``X`` to id tuples, rejecting anything the task cannot hold."""
    if isinstance(X, (str, bytes)):
        raise TypeError("X must be a list of token sequences, not a string")
    out = []
    for row in X:
        if isinstance(row, str):
            row = row.split()
        row = list(row)
        if row and isinstance(row[0], str):
            ids = encode(row, task.vocab)
        else:
            ids = [int(t) for t in row]
        bad = validate_trajectory(Trajectory(ids, 0.0), task)
        if bad:
            raise ValueError(f"invalid sequence {row!r}: {bad}")
        out.append(tuple(ids))
    return out


class SoftQGenerator(BaseEstimator):
    """Sequence generator trained with soft Q-learning on one task."""

    def __init__(self, task=None, arch="recurrent_cell", embed_dim=16, hidden_dim=32,
                 window=None, gamma=1.0, reward_scale=1.0, lr=1e-3, optimizer="adam",
                 steps=1000, batch_off=0, batch_on=16, warmup_steps=0, rho=0.999,
                 weights=None, filter_threshold=None, eval_every=None, random_state=0):
        self.task = task
        self.arch = arch
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.window = window
        self.gamma = gamma
        self.reward_scale = reward_scale
        self.lr = lr
        self.optimizer = optimizer
        self.steps = steps
        self.batch_off = batch_off
        self.batch_on = batch_on
        self.warmup_steps = warmup_steps
        self.rho = rho
        self.weights = weights
        self.filter_threshold = filter_threshold
        self.eval_every = eval_every
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(arch=self.arch, embed_dim=self.embed_dim,
                            hidden_dim=self.hidden_dim, window=self.window)
        return TrainConfig(
            gamma=self.gamma, reward_scale=self.reward_scale, lr=self.lr,
            optimizer=self.optimizer, steps=self.steps, batch_off=self.batch_off,
            batch_on=self.batch_on, warmup_steps=self.warmup_steps, rho=self.rho,
            weights=LossWeights(**(self.weights or {})), model=model,
            seed=int(self.random_state), eval_every=self.eval_every or max(1, self.steps),
        )

    def fit(self, X=None, y=None):
        if not isinstance(self.task, TaskSpec):
            raise TypeError("task must be a TaskSpec")
        task = self.task
        if X is not None:
            seqs = check_sequences(X, task)
            if y is None:
                y = [reward(task.reward_spec, task.content(s)) for s in seqs]
            y = np.asarray(y, dtype=float)
            if y.shape != (len(seqs),) or not np.all(np.isfinite(y)):
                raise ValueError("y must be a finite vector with one reward per sequence")
            data = [Trajectory(s, float(r), Source.OFF_POLICY) for s, r in zip(seqs, y)]
            task = task.with_dataset(data)
        if self.filter_threshold is not None:
            if not task.dataset:
                raise ValueError("filter_threshold needs offline data")
            task = task.with_dataset(
                filter_dataset_by_reward(task.dataset, None, self.filter_threshold))
        config = self._train_config()
        if config.batch_off > 0 and not task.dataset:
            raise ValueError("batch_off > 0 needs offline data")
        self.model_, self.state_, self.history_ = run_training(task, config)
        self.params_ = self.state_.params
        self.task_ = task
        return self

    def predict(self, X=None):
        """Greedy completion of each prefix in ``X`` (the empty prefix if omitted)."""
        check_is_fitted(self, "params_")
        prefixes = [()] if X is None else check_sequences(X, self.task_)
        out = []
        for prefix in prefixes:
            traj = greedy_decode(self.model_, self.params_, self.task_, prefix)
            out.append(list(traj.token_ids))
        return out

    def predict_proba(self, X=None):
        """Next-token distribution after each prefix, shape ``(n, |V|)``."""
        check_is_fitted(self, "params_")
        prefixes = [()] if X is None else check_sequences(X, self.task_)
        for p in prefixes:
            if self.task_.is_terminal(p):
                raise ValueError(f"prefix {list(p)} is terminal")
        return np.stack([policy_from_q(self.model_.q_row(self.params_, p)) for p in prefixes])

    def sample(self, n=1, p=1.0, temperature=1.0, seed=None):
        check_is_fitted(self, "params_")
        rng = child_rng(self.random_state if seed is None else seed, "eval", 0)
        seqs, _ = sample_sequences(self.model_, self.params_, self.task_, n, rng,
                                   temperature=temperature, p=p)
        return [list(s) for s in seqs]

    def score(self, X, y=None):
        """Mean per-token log-likelihood of ``X`` (higher is better)."""
        check_is_fitted(self, "params_")
        data = [Trajectory(s, 0.0) for s in check_sequences(X, self.task_)]
        return -heldout_nll(self.model_, self.params_, data, self.task_.vocab.pad_id)
