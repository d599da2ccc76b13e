"""Exact soft-optimal tables for tasks small enough to enumerate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

from .core import TaskSpec
from .qmodel import policy_from_q, state_value
from .rewards import reward

DEFAULT_CAP = 10**6


class EnumerationCapExceeded(ValueError):
    pass


@dataclass(frozen=True)
class OracleTables:
    q_star: dict  # prefix tuple -> (V,) array
    v_star: dict
    pi_star: dict
    gamma: float
    scale: float

    def prefixes(self):
        return list(self.q_star)

    def to_json(self, vocab) -> dict:
        def key(prefix):
            return " ".join(vocab.tokens[i] for i in prefix)

        return {
            "gamma": self.gamma,
            "scale": self.scale,
            "tokens": list(vocab.tokens),
            "states": {
                key(p): {"q": self.q_star[p].tolist(), "v": float(self.v_star[p]),
                         "pi": self.pi_star[p].tolist()}
                for p in self.q_star
            },
        }


def _check_cap(task: TaskSpec, cap: int) -> None:
    count = task.vocab.size ** task.t_max
    if count > cap:
        raise EnumerationCapExceeded(
            f"task has {count} candidate sequences (|V|^t_max), above the enumeration cap {cap}")


def terminal_reward(task: TaskSpec, ids, scale: float = 1.0) -> float:
    return scale * reward(task.reward_spec, task.content(ids))


def soft_value_iteration(task: TaskSpec, gamma: float = 1.0, scale: float = 1.0,
                         cap: int = DEFAULT_CAP) -> OracleTables:
    """Backward soft Bellman recursion over every non-terminal prefix.

    ``scale`` multiplies the task's own reward scale.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    _check_cap(task, cap)
    n = task.vocab.size
    q_star, v_star, pi_star = {}, {}, {}

    def visit(prefix):
        q = np.empty(n)
        for a in range(n):
            child = prefix + (a,)
            if task.is_terminal(child):
                q[a] = terminal_reward(task, child, scale)
            else:
                q[a] = gamma * visit(child)
        v = float(state_value(q))
        q_star[prefix], v_star[prefix], pi_star[prefix] = q, v, policy_from_q(q)
        return v

    visit(())
    return OracleTables(q_star, v_star, pi_star, gamma, scale)


PolicyLike = Union[Mapping[tuple, np.ndarray], Callable[[tuple], np.ndarray]]


def exact_policy_return(task: TaskSpec, policy: PolicyLike, gamma: float = 1.0,
                        scale: float = 1.0, cap: int = DEFAULT_CAP):
    """Exact ``(expected discounted reward, soft return)`` of a policy.

    The soft return adds the discounted Shannon entropy (nats) of the policy
    at every visited state.
    """
    _check_cap(task, cap)
    get = policy if callable(policy) else policy.__getitem__
    n = task.vocab.size

    def visit(prefix):
        probs = np.asarray(get(prefix), dtype=float)
        if probs.shape != (n,):
            raise ValueError(f"policy row for {prefix} has shape {probs.shape}")
        nz = probs > 0
        entropy = -float(np.sum(probs[nz] * np.log(probs[nz])))
        exp_r, soft = 0.0, entropy
        for a in range(n):
            if probs[a] == 0.0:
                continue
            child = prefix + (a,)
            if task.is_terminal(child):
                r = terminal_reward(task, child, scale)
                cr, cs = r, r
            else:
                cr, cs = visit(child)
                cr, cs = gamma * cr, gamma * cs
            exp_r += probs[a] * cr
            soft += probs[a] * cs
        return exp_r, soft

    return visit(())


def state_visitation(task: TaskSpec, policy: PolicyLike) -> dict:
    """Probability that ``policy`` reaches each non-terminal prefix."""
    get = policy if callable(policy) else policy.__getitem__
    reach = {}

    def visit(prefix, p):
        reach[prefix] = p
        probs = np.asarray(get(prefix), dtype=float)
        for a, pa in enumerate(probs):
            child = prefix + (a,)
            if pa > 0 and not task.is_terminal(child):
                visit(child, p * pa)

    visit((), 1.0)
    return reach


def tv_distance(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def consistency_residuals(tables: OracleTables, task: TaskSpec) -> dict:
    """Single-step path-consistency residual at every (prefix, token)."""
    out = {}
    for prefix, q in tables.q_star.items():
        v = tables.v_star[prefix]
        logpi = np.log(tables.pi_star[prefix])
        for a in range(len(q)):
            child = prefix + (a,)
            if task.is_terminal(child):
                r, v_next = terminal_reward(task, child, tables.scale), 0.0
            else:
                r, v_next = 0.0, tables.v_star[child]
            out[(prefix, a)] = -v + tables.gamma * v_next + r - logpi[a]
    return out
