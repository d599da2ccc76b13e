"""Training losses over padded batches.

Every loss is a masked mean over valid positions (PG: mean over sequences of
the per-sequence sum).  Target-network quantities are plain arrays, so
gradients only flow through the live parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffengine as F
from .core import Batch, Trajectory, pad_batch
from .qmodel import QModel, TargetModel

COMPONENTS = ("pcl_single", "pcl_multi", "mle", "pg", "q_hard", "sql_vanilla")


@dataclass(frozen=True)
class LossWeights:
    w_pcl_single: float = 1.0
    w_pcl_multi: float = 1.0
    w_mle: float = 0.0
    w_pg: float = 0.0
    w_q_hard: float = 0.0
    # pins the absolute Q level, which log-policy gradients leave untouched
    w_sql_vanilla: float = 1.0

    def __post_init__(self):
        vals = asdict(self).values()
        if any(w < 0 for w in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in vals):
            raise ValueError("at least one loss weight must be positive")

    def items(self):
        return [(name, getattr(self, "w_" + name)) for name in COMPONENTS]


def _target_params(target):
    return target.params if isinstance(target, TargetModel) else target


class _Prepared:
    """Shared per-batch quantities: live log-probs plus constant targets."""

    def __init__(self, model: QModel, params, target, batch: Batch, gamma: float):
        if not 0.0 < gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        self.gamma = gamma
        self.mask = batch.mask
        b, length = batch.mask.shape
        self.n_rows = b
        self.tokens = np.where(batch.mask > 0, batch.token_matrix, 0)
        lengths = batch.lengths
        pos = np.arange(length)
        self.last = (pos[None, :] == (lengths - 1)[:, None]).astype(float)
        self.r = self.last * batch.rewards[:, None]
        expo = np.maximum((lengths - 1)[:, None] - pos[None, :], 0)
        self.reward_to_go = np.where(batch.mask > 0, gamma ** expo * batch.rewards[:, None], 0.0)

        self.q = model.q_rows_batch(params, batch.token_matrix)
        self.logp = F.gather(F.log_softmax(self.q), self.tokens)
        self.q_taken = F.gather(self.q, self.tokens)

        next_mask = np.zeros_like(batch.mask)
        next_mask[:, :-1] = batch.mask[:, 1:]
        self.next_mask = next_mask
        self.has_target = target is not None
        if target is not None:
            qbar = np.asarray(model.q_rows_batch(_target_params(target), batch.token_matrix))
            vbar = np.asarray(F.logsumexp(qbar))
            self.vbar = vbar
            self.vbar_next = np.zeros_like(vbar)
            self.vbar_next[:, :-1] = vbar[:, 1:]
            self.vbar_next *= next_mask
            qmax = qbar.max(axis=-1)
            self.qmax_next = np.zeros_like(qmax)
            self.qmax_next[:, :-1] = qmax[:, 1:]
            self.qmax_next *= next_mask

    def require_target(self):
        if not self.has_target:
            raise ValueError("this loss needs target parameters")

    # -- residuals ----------------------------------------------------------

    def pcl_single_residual(self):
        self.require_target()
        const = -self.vbar + self.gamma * self.vbar_next + self.r
        return F.sub(const, self.logp)

    def discounted_logp_sum(self):
        """``G_t = sum_l gamma^l log pi(a_{t+l} | s_{t+l})`` up to the row end."""
        length = self.mask.shape[1]
        cols = [None] * length
        acc = np.zeros(self.n_rows)
        for t in range(length - 1, -1, -1):
            col = F.mul(F.getitem(self.logp, (slice(None), t)), self.mask[:, t])
            acc = F.add(col, F.mul(acc, self.gamma))
            cols[t] = acc
        return F.stack(cols, axis=1)

    def pcl_multi_residual(self):
        self.require_target()
        return F.sub(-self.vbar + self.reward_to_go, self.discounted_logp_sum())

    # -- losses -------------------------------------------------------------

    def half_sq_mean(self, residual):
        return F.masked_mean(F.mul(F.square(residual), 0.5), self.mask)

    def pcl_single(self):
        return self.half_sq_mean(self.pcl_single_residual())

    def pcl_multi(self):
        return self.half_sq_mean(self.pcl_multi_residual())

    def mle(self):
        return F.masked_mean(F.mul(self.logp, -1.0), self.mask)

    def pg(self, baseline: float = 0.0):
        weight = -(self.reward_to_go - baseline)
        return F.mul(F.masked_sum(F.mul(self.logp, weight), self.mask), 1.0 / self.n_rows)

    def q_hard(self):
        self.require_target()
        return self.half_sq_mean(F.sub(self.r + self.gamma * self.qmax_next, self.q_taken))

    def sql_vanilla(self):
        self.require_target()
        return self.half_sq_mean(F.sub(self.r + self.gamma * self.vbar_next, self.q_taken))


def prepare(model, params, target, batch, gamma) -> _Prepared:
    return _Prepared(model, params, target, batch, gamma)


def reward_to_go(traj: Trajectory, gamma: float) -> np.ndarray:
    n = len(traj)
    return traj.terminal_reward * gamma ** np.arange(n - 1, -1, -1, dtype=float)


def loss_mle(model, params, batch, gamma=1.0):
    return prepare(model, params, None, batch, gamma).mle()


def loss_pg(model, params, on_policy_batch, gamma=1.0, baseline: float = 0.0):
    return prepare(model, params, None, on_policy_batch, gamma).pg(baseline)


def loss_q_hard(model, params, target, batch, gamma=1.0):
    return prepare(model, params, target, batch, gamma).q_hard()


def loss_sql_vanilla(model, params, target, batch, gamma=1.0):
    return prepare(model, params, target, batch, gamma).sql_vanilla()


def loss_pcl_single(model, params, target, batch, gamma=1.0):
    return prepare(model, params, target, batch, gamma).pcl_single()


def loss_pcl_multi(model, params, target, batch, gamma=1.0):
    return prepare(model, params, target, batch, gamma).pcl_multi()


def loss_combined(model, params, target, on_trajs: Sequence[Trajectory],
                  off_trajs: Sequence[Trajectory], weights: LossWeights, gamma: float,
                  pad_id: int, pg_baseline: float = 0.0, components: Optional[Sequence] = None):
    """Weighted sum of enabled losses plus a ``{name: value}`` breakdown.

    Value-based and MLE terms see the union of both batches; PG sees only the
    on-policy batch.  ``components`` restricts which terms are evaluated.
    """
    on_trajs, off_trajs = list(on_trajs), list(off_trajs)
    if not on_trajs and not off_trajs:
        raise ValueError("both batches are empty")
    enabled = [(n, w) for n, w in weights.items()
               if w > 0 and (components is None or n in components)]
    if any(n == "pg" for n, _ in enabled) and not on_trajs:
        raise ValueError("policy-gradient weight > 0 requires on-policy samples")

    needs_target = any(n in ("pcl_single", "pcl_multi", "q_hard", "sql_vanilla") for n, _ in enabled)
    union = prepare(model, params, target if needs_target else None,
                    pad_batch(on_trajs + off_trajs, pad_id), gamma)
    total = 0.0
    breakdown = {}
    for name, w in enabled:
        if name == "pg":
            on = prepare(model, params, None, pad_batch(on_trajs, pad_id), gamma)
            term = on.pg(pg_baseline)
        else:
            term = getattr(union, name)()
        breakdown[name] = float(F.value(term))
        total = F.add(total, F.mul(term, w))
    return total, breakdown
