"""Training loop: off-policy draws, on-policy rollouts, loss, update, target sync."""
from __future__ import annotations

import datetime
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import diffengine as F
from .core import Source, TaskSpec, Trajectory, task_to_json
from .decoding import greedy_decode, sample_sequences
from .metrics import MetricsRecord, entropy_h
from .objectives import LossWeights, loss_combined
from .oracle import (EnumerationCapExceeded, exact_policy_return, soft_value_iteration,
                     state_visitation, tv_distance)
from .qmodel import (ModelConfig, QModel, TargetModel, copy_params, load_checkpoint,
                     params_from_json, params_to_json, policy_from_q, polyak_update,
                     save_checkpoint, state_value)
from .rewards import reward

log = logging.getLogger(__name__)

# child-seed keys; new consumers get new keys so existing streams never shift
STREAMS = {"init": 0, "offpolicy": 1, "rollout": 2, "eval": 3}
ORACLE_EVAL_CAP = 20_000


def child_rng(seed: int, stream: str, step: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[stream], step)))


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    reward_scale: float = 1.0
    lr: float = 1e-3
    optimizer: str = "adam"
    steps: int = 1000
    batch_off: int = 0
    batch_on: int = 16
    warmup_steps: int = 0
    rho: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    eval_every: int = 100
    pg_baseline: bool = True
    baseline_decay: float = 0.95
    temperature: float = 1.0
    eval_p: tuple = (1.0,)
    eval_samples: int = 200
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.reward_scale > 0 or not self.lr >= 0:
            raise ValueError("reward_scale must be > 0 and lr >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.warmup_steps < 0 or self.eval_every < 1:
            raise ValueError("steps/warmup_steps must be >= 0 and eval_every >= 1")
        if self.batch_off < 0 or self.batch_on < 0 or self.batch_off + self.batch_on < 1:
            raise ValueError("need batch_off + batch_on >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.weights.w_pg > 0 and self.batch_on < 1:
            raise ValueError("w_pg > 0 requires batch_on >= 1")
        object.__setattr__(self, "eval_p", tuple(float(p) for p in self.eval_p))

    def to_json(self) -> dict:
        out = asdict(self)
        out["eval_p"] = list(self.eval_p)
        return out

    @classmethod
    def from_json(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise KeyError(f"unknown config key {sorted(unknown)[0]!r}")
        if "weights" in raw:
            raw["weights"] = LossWeights(**raw["weights"])
        if "model" in raw:
            raw["model"] = ModelConfig(**raw["model"])
        if "eval_p" in raw:
            raw["eval_p"] = tuple(raw["eval_p"])
        return cls(**raw)


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def sgd_update(params, grad, lr, optimizer="sgd", state: Optional[OptimizerState] = None,
               beta1=0.9, beta2=0.999, eps=1e-8):
    """One descent step; returns ``(new_params, new_state)``."""
    if set(params) != set(grad):
        raise ValueError("params and grad have different names")
    for k in params:
        if np.shape(params[k]) != np.shape(grad[k]):
            raise ValueError(f"shape mismatch for {k}")
    if optimizer == "sgd":
        return {k: params[k] - lr * grad[k] for k in params}, state
    if optimizer != "adam":
        raise ValueError(f"unknown optimizer {optimizer!r}")
    state = state or OptimizerState.zeros_like(params)
    t = state.t + 1
    m = {k: beta1 * state.m[k] + (1 - beta1) * grad[k] for k in params}
    v = {k: beta2 * state.v[k] + (1 - beta2) * grad[k] * grad[k] for k in params}
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new = {k: params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps) for k in params}
    return new, OptimizerState(m, v, t)


# -- state --------------------------------------------------------------------


@dataclass
class TrainState:
    params: dict
    target: TargetModel
    opt: OptimizerState
    step: int = 0
    baseline: Optional[float] = None


class TrainingDiverged(FloatingPointError):
    pass


def init_state(model: QModel, config: TrainConfig) -> TrainState:
    params = model.init_params(child_rng(config.seed, "init"))
    return TrainState(params, TargetModel(copy_params(params), config.rho),
                      OptimizerState.zeros_like(params), 0, None)


def _scaled(traj: Trajectory, factor: float) -> Trajectory:
    if factor == 1.0:
        return traj
    return Trajectory(traj.token_ids, traj.terminal_reward * factor, traj.source)


def draw_batches(state: TrainState, model: QModel, task: TaskSpec, config: TrainConfig):
    step = state.step
    off = []
    if config.batch_off > 0 and task.dataset:
        rng = child_rng(config.seed, "offpolicy", step)
        idx = rng.integers(len(task.dataset), size=config.batch_off)
        off = [_scaled(task.dataset[i], config.reward_scale) for i in idx]
    on = []
    if config.batch_on > 0 and step >= config.warmup_steps:
        rng = child_rng(config.seed, "rollout", step)
        seqs, _ = sample_sequences(model, state.params, task, config.batch_on, rng,
                                   temperature=config.temperature)
        scale = config.reward_scale
        on = [Trajectory(s, scale * reward(task.reward_spec, task.content(s)), Source.ON_POLICY)
              for s in seqs]
    return on, off


def train_step(state: TrainState, model: QModel, task: TaskSpec, config: TrainConfig):
    """Returns ``(new_state, metrics)`` for one update."""
    on, off = draw_batches(state, model, task, config)
    if not on and not off:
        raise ValueError(f"step {state.step}: no samples (no dataset and warmup still active?)")
    weights = config.weights
    components = None
    if not on:
        components = [n for n, w in weights.items() if n != "pg"]
        if not any(getattr(weights, "w_" + n) > 0 for n in components):
            raise ValueError(f"step {state.step}: only policy gradient enabled but no rollouts")
    baseline = state.baseline if (config.pg_baseline and state.baseline is not None) else 0.0

    breakdown = {}

    def objective(p):
        total, parts = loss_combined(model, p, state.target, on, off, weights, config.gamma,
                                     task.vocab.pad_id, pg_baseline=baseline,
                                     components=components)
        breakdown.update(parts)
        return total

    try:
        loss, grads = F.backward(objective, state.params)
    except F.NonFiniteError as exc:
        raise TrainingDiverged(_dump(state.step, on, off, str(exc))) from exc
    if not np.isfinite(loss):
        raise TrainingDiverged(_dump(state.step, on, off, f"loss {loss}"))

    params, opt = sgd_update(state.params, grads, config.lr, config.optimizer, state.opt)
    # parameter update precedes the target update, so the target mixes in the new params
    target = polyak_update(state.target, params)

    new_baseline = state.baseline
    metrics = {"loss_total": loss, **{f"loss_{k}": v for k, v in breakdown.items()},
               "n_on": len(on), "n_off": len(off)}
    if on:
        batch_mean = float(np.mean([t.terminal_reward for t in on]))
        metrics["mean_reward_on"] = batch_mean
        if new_baseline is None:
            new_baseline = batch_mean
        else:
            new_baseline = config.baseline_decay * new_baseline + (1 - config.baseline_decay) * batch_mean
    if off:
        metrics["mean_reward_off"] = float(np.mean([t.terminal_reward for t in off]))
    new_state = TrainState(params, target, opt, state.step + 1, new_baseline)
    return new_state, metrics


def _dump(step, on, off, why):
    rows = [{"tokens": list(t.token_ids), "reward": t.terminal_reward, "source": t.source.value}
            for t in list(on) + list(off)]
    return f"non-finite loss at step {step} ({why}); batch={json.dumps(rows)}"


# -- evaluation ---------------------------------------------------------------


def oracle_for(task: TaskSpec, config: TrainConfig):
    try:
        return soft_value_iteration(task, config.gamma, config.reward_scale, cap=ORACLE_EVAL_CAP)
    except EnumerationCapExceeded:
        return None


def oracle_gaps(model, params, task, tables, min_reach: float = 0.01):
    """Max TV and max |V_theta - V*| over prefixes pi* reaches with prob >= min_reach."""
    reach = state_visitation(task, tables.pi_star)
    q_table = model.policy_table(params, task)
    tv, verr = 0.0, 0.0
    for prefix, p in reach.items():
        if p < min_reach:
            continue
        q = q_table[prefix]
        tv = max(tv, tv_distance(policy_from_q(q), tables.pi_star[prefix]))
        verr = max(verr, abs(float(state_value(q)) - tables.v_star[prefix]))
    return tv, verr


def evaluate(model, params, task, config: TrainConfig, step: int, tables=None) -> dict:
    out = {}
    out["mean_reward_greedy"] = greedy_decode(model, params, task, scale=config.reward_scale).terminal_reward
    for i, p in enumerate(config.eval_p):
        rng = child_rng(config.seed, "eval", step * 64 + i)
        seqs, _ = sample_sequences(model, params, task, config.eval_samples, rng, p=p)
        rewards = [config.reward_scale * reward(task.reward_spec, task.content(s)) for s in seqs]
        content = [task.content(s) for s in seqs]
        h1, h2 = entropy_h(content, 1), entropy_h(content, 2)
        if i == 0:
            out["h1"], out["h2"] = h1, h2
            out["mean_reward_sample"] = float(np.mean(rewards))
        if len(config.eval_p) > 1:
            out[f"mean_reward@{p}"] = float(np.mean(rewards))
            out[f"h1@{p}"], out[f"h2@{p}"] = h1, h2
    if tables is not None:
        out["tv_to_oracle"], out["v_err_to_oracle"] = oracle_gaps(model, params, task, tables)
        policy = {p: policy_from_q(q) for p, q in model.policy_table(params, task).items()}
        out["expected_reward"], out["soft_return"] = exact_policy_return(
            task, policy, config.gamma, config.reward_scale)
    return out


# -- driver -------------------------------------------------------------------


def _checkpoint(path, model, state: TrainState, config: TrainConfig):
    save_checkpoint(path, model, state.params, state.target, state.step, config.seed, extra={
        "train_config": config.to_json(),
        "optimizer": {"t": state.opt.t, "m": params_to_json(state.opt.m),
                      "v": params_to_json(state.opt.v)},
        "baseline": state.baseline,
    })


def resume_state(path):
    model, params, target, raw = load_checkpoint(path)
    opt_raw = raw["optimizer"]
    opt = OptimizerState(params_from_json(opt_raw["m"]), params_from_json(opt_raw["v"]), opt_raw["t"])
    config = TrainConfig.from_json(raw["train_config"])
    return model, TrainState(params, target, opt, raw["step"], raw.get("baseline")), config


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=False)


def run_training(task: TaskSpec, config: TrainConfig, out_dir=None, resume_from=None,
                 callback=None):
    """Run ``config.steps`` updates, evaluating every ``eval_every`` steps.

    Writes ``manifest.json``, ``metrics.jsonl`` and JSON checkpoints into
    ``out_dir`` when given.  Returns ``(model, final_state, records)``.
    ``callback(step, record)`` returning True stops the run early.
    """
    if resume_from is not None:
        model, state, _ = resume_state(resume_from)
    else:
        model = QModel(config.model, task.vocab.size, task.t_max)
        state = init_state(model, config)
    tables = oracle_for(task, config)

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": __version__,
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "seed": config.seed,
            "config": config.to_json(),
            "task": task_to_json(task),
            "dataset_size": len(task.dataset or ()),
            "resumed_from": str(resume_from) if resume_from else None,
            "outputs": {"metrics": "metrics.jsonl", "checkpoints": "ckpt_*.json",
                        "final": "final.json"},
        }
        if resume_from is None or not (out / "manifest.json").exists():
            with open(out / "manifest.json", "w") as fh:
                json.dump(manifest, fh, indent=2)
        metrics_fh = open(out / "metrics.jsonl", "a" if resume_from else "w")
        if resume_from is None:
            _checkpoint(out / "ckpt_0.json", model, state, config)

    records = []
    ckpt_every = config.checkpoint_every or config.eval_every
    try:
        while state.step < config.steps:
            state, metrics = train_step(state, model, task, config)
            done = state.step
            if done % config.eval_every == 0 or done == config.steps:
                metrics.update(evaluate(model, state.params, task, config, done, tables))
                record = MetricsRecord(done, metrics).to_json()
                records.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(_dumps(record) + "\n")
                    metrics_fh.flush()
                if callback is not None and callback(done, record):
                    break
            if out is not None and done % ckpt_every == 0:
                _checkpoint(out / f"ckpt_{done}.json", model, state, config)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        _checkpoint(out / "final.json", model, state, config)
    return model, state, records


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
