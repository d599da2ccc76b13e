"""Evaluation quantities: n-gram diversity, held-out NLL, reward moments."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as F
from .core import pad_batch

ENTROPY_BASE = "e"


@dataclass
class MetricsRecord:
    step: int
    values: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        for k, v in self.values.items():
            if v is not None and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")
        return {"step": self.step, **self.values}


class NoNgramsWarning(UserWarning):
    pass


def entropy_h(samples, n: int = 1) -> float:
    """Shannon entropy (nats) of the n-gram distribution pooled over samples."""
    if not samples:
        raise ValueError("entropy_h needs at least one sample")
    counts = Counter()
    for seq in samples:
        seq = tuple(seq)
        for i in range(len(seq) - n + 1):
            counts[seq[i:i + n]] += 1
    total = sum(counts.values())
    if total == 0:
        warnings.warn(f"no {n}-grams in samples", NoNgramsWarning, stacklevel=2)
        return 0.0
    p = np.array(list(counts.values()), dtype=float) / total
    return float(-(p * np.log(p)).sum())


def heldout_nll(model, params, dataset, pad_id: int) -> float:
    """Mean per-token negative log-likelihood; perplexity is ``exp`` of it."""
    if not dataset:
        raise ValueError("dataset is empty")
    batch = pad_batch(list(dataset), pad_id)
    q = model.q_rows_batch(params, batch.token_matrix)
    tokens = np.where(batch.mask > 0, batch.token_matrix, 0)
    logp = F.gather(F.log_softmax(q), tokens)
    return float(-F.value(F.masked_mean(logp, batch.mask)))


def perplexity(nll: float) -> float:
    return math.exp(nll)


def reward_summary(rewards) -> dict:
    r = np.asarray(list(rewards), dtype=float)
    if r.size == 0:
        raise ValueError("no rewards to summarise")
    return {"mean": float(r.mean()), "std": float(r.std()), "max": float(r.max())}
