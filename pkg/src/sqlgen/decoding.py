"""Sampling rollouts and greedy / nucleus / beam decoding from Q-rows."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Source, TaskSpec, Trajectory
from .diffengine import log_softmax
from .qmodel import QModel, policy_from_q
from .rewards import reward


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "sample"  # greedy | sample | top_p | beam
    p: float = 1.0
    beam_width: int = 4
    max_len: Optional[int] = None
    temperature: float = 1.0
    length_normalize: bool = False

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "top_p", "beam"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


def top_p_filter(probs, p: float) -> np.ndarray:
    """Zero everything outside the smallest high-probability set with mass >= p.

    Works row-wise on 2-D input.  Ties are ordered by token index.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    probs = np.asarray(probs, dtype=float)
    if p >= 1.0:
        return probs.copy()
    flat = probs.reshape(-1, probs.shape[-1])
    order = np.argsort(-flat, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(flat, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    # keep a token if the mass before it is still short of p
    keep_sorted = (cum - sorted_p) < p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, flat, 0.0)
    out /= out.sum(axis=-1, keepdims=True)
    return out.reshape(probs.shape)


def nucleus(probs, p: float) -> set:
    return set(np.flatnonzero(top_p_filter(probs, p) > 0).tolist())


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    ids = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(ids, probs.shape[-1] - 1)


def _score(task: TaskSpec, ids, scale: float) -> float:
    return scale * reward(task.reward_spec, task.content(ids))


def sample_sequences(model: QModel, params, task: TaskSpec, n: int, rng: np.random.Generator,
                     temperature: float = 1.0, p: float = 1.0, max_len: Optional[int] = None):
    """Sample ``n`` episodes in lockstep; returns ``(sequences, logprobs)``.

    Log-probabilities are under the (tempered, filtered) sampling distribution.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    horizon = min(task.t_max, max_len or task.t_max)
    eos = task.vocab.eos_id
    tokens = np.zeros((n, horizon), dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    logprob = np.zeros(n)
    state = model.initial_state(n)
    prev = np.full(n, model.start_id)
    for t in range(horizon):
        q, state = model.step(params, state, t, prev)
        probs = policy_from_q(np.asarray(q) / temperature)
        if p < 1.0:
            probs = top_p_filter(probs, p)
        ids = _sample_rows(probs, rng)
        ids = np.where(alive, ids, 0)
        logprob += np.where(alive, np.log(probs[np.arange(n), ids]), 0.0)
        tokens[:, t] = ids
        lengths += alive
        if eos is not None:
            alive &= ids != eos
        prev = ids
        if not alive.any():
            break
    seqs = [tuple(tokens[i, : lengths[i]].tolist()) for i in range(n)]
    return seqs, logprob


def rollout(model: QModel, params, task: TaskSpec, n: int, rng: np.random.Generator,
            temperature: float = 1.0, p: float = 1.0, scale: float = 1.0):
    seqs, _ = sample_sequences(model, params, task, n, rng, temperature, p)
    return [Trajectory(s, _score(task, s, scale), Source.ON_POLICY) for s in seqs]


def greedy_decode(model: QModel, params, task: TaskSpec, prefix: Sequence[int] = (),
                  scale: float = 1.0) -> Trajectory:
    """Argmax continuation of ``prefix``; ties go to the lowest token index."""
    seq = list(prefix)
    state = model.initial_state(1)
    for t, tok in enumerate(seq):
        _, state = model.step(params, state, t, [model.start_id if t == 0 else seq[t - 1]])
    while not task.is_terminal(seq):
        t = len(seq)
        q, state = model.step(params, state, t, [model.start_id if t == 0 else seq[-1]])
        seq.append(int(np.argmax(np.asarray(q)[0])))
    return Trajectory(seq, _score(task, seq, scale), Source.ON_POLICY)


def beam_search(model: QModel, params, task: TaskSpec, width: int, scale: float = 1.0,
                length_normalize: bool = False):
    """Beam search over summed token log-probabilities.

    Returns finished hypotheses as ``(Trajectory, score)`` sorted best first;
    equal scores are ordered by token sequence.
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    beams = [((), 0.0, model.initial_state(1))]
    finished = []
    while beams:
        candidates = []
        for seq, score, state in beams:
            t = len(seq)
            q, new_state = model.step(params, state, t, [model.start_id if t == 0 else seq[-1]])
            logp = log_softmax(np.asarray(q)[0])
            for a in range(model.vocab_size):
                candidates.append((score + logp[a], seq + (a,), new_state))
        # best score first, then lowest token sequence
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for score, seq, state in candidates[:width]:
            if task.is_terminal(seq):
                finished.append((seq, score))
            else:
                beams.append((seq, score, state))
        if len(finished) >= width:
            best_alive = max((s for _, s, _ in beams), default=-np.inf)
            worst_kept = sorted(s for _, s in finished)[-width]
            # log-probabilities only decrease, so alive beams cannot overtake
            if best_alive <= worst_kept and not length_normalize:
                break

    def final(item):
        seq, score = item
        return score / len(seq) if length_normalize else score

    finished.sort(key=lambda it: (-final(it), it[0]))
    return [(Trajectory(seq, _score(task, seq, scale), Source.ON_POLICY), final((seq, s)))
            for seq, s in finished[:width]]


def exhaustive_argmax(model: QModel, params, task: TaskSpec):
    """Highest-probability complete sequence by brute-force enumeration."""
    best = (-np.inf, None)

    def visit(prefix, score, state):
        nonlocal best
        t = len(prefix)
        q, new_state = model.step(params, state, t, [model.start_id if t == 0 else prefix[-1]])
        logp = log_softmax(np.asarray(q)[0])
        for a in range(model.vocab_size):
            child = prefix + (a,)
            s = score + logp[a]
            if task.is_terminal(child):
                if s > best[0] or (s == best[0] and child < best[1]):
                    best = (s, child)
            else:
                visit(child, s, new_state)

    visit((), 0.0, model.initial_state(1))
    return best[1], best[0]
