"""Q-function models whose outputs double as generation logits.

A model maps a prefix to one Q-value per vocabulary token.  The induced policy
is the softmax of that row, the state value its log-sum-exp, and the advantage
their difference.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffengine as F


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "recurrent_cell"  # or "fixed_window_mlp"
    embed_dim: int = 16
    hidden_dim: int = 32
    window: Optional[int] = None  # fixed_window_mlp only; defaults to t_max
    init_scale: float = 0.1

    def __post_init__(self):
        if self.arch not in ("recurrent_cell", "fixed_window_mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")


class QModel:
    """Architecture bound to a vocabulary size and horizon.

    Parameters live in plain dicts (``ParamVector``) so that the model object
    itself is stateless and shareable.
    """

    def __init__(self, config: ModelConfig, vocab_size: int, t_max: int):
        self.config = config
        self.vocab_size = vocab_size
        self.t_max = t_max
        self.window = config.window or t_max
        if config.arch == "fixed_window_mlp" and self.window > t_max:
            raise ValueError("window must not exceed t_max")
        # row ``vocab_size`` of the embedding table is the start-of-prefix slot
        self.start_id = vocab_size

    def param_shapes(self) -> dict:
        c, v = self.config, self.vocab_size
        shapes = {"embed": (v + 1, c.embed_dim)}
        if c.arch == "recurrent_cell":
            shapes["w_in"] = (c.embed_dim, c.hidden_dim)
            shapes["w_rec"] = (c.hidden_dim, c.hidden_dim)
        else:
            shapes["w_in"] = (self.window * c.embed_dim, c.hidden_dim)
        shapes["pos"] = (self.t_max, c.hidden_dim)
        shapes["w_out"] = (c.hidden_dim, v)
        shapes["b_out"] = (v,)
        return shapes

    def init_params(self, rng: np.random.Generator) -> dict:
        s = self.config.init_scale
        params = {}
        for name, shape in self.param_shapes().items():
            if name == "b_out":
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.uniform(-s, s, size=shape)
        return params

    def zero_params(self) -> dict:
        return {k: np.zeros(s) for k, s in self.param_shapes().items()}

    # -- forward ------------------------------------------------------------

    def initial_state(self, n: int):
        if self.config.arch == "recurrent_cell":
            return None
        return np.full((n, self.window), self.start_id, dtype=np.int64)

    def step(self, params, state, t: int, input_ids):
        """Consume the token emitted at step ``t - 1`` (start slot at t=0).

        Returns the Q-rows for state ``s_t`` and the new recurrent state.
        """
        input_ids = np.asarray(input_ids)
        if self.config.arch == "recurrent_cell":
            x = F.rows(params["embed"], input_ids)
            pre = F.add(F.matmul(x, params["w_in"]), F.getitem(params["pos"], t))
            if state is not None:
                pre = F.add(pre, F.matmul(state, params["w_rec"]))
            h = F.tanh(pre)
            new_state = h
        else:
            slots = np.concatenate([state[:, 1:], input_ids[:, None]], axis=1)
            x = F.rows(params["embed"], slots)  # (n, window, E)
            x = F.reshape(x, (slots.shape[0], -1))
            h = F.tanh(F.add(F.matmul(x, params["w_in"]), F.getitem(params["pos"], t)))
            new_state = slots
        q = F.add(F.matmul(h, params["w_out"]), params["b_out"])
        return q, new_state

    def q_rows_batch(self, params, token_matrix: np.ndarray):
        """Q-rows for states ``s_0 .. s_{L-1}`` of every row: shape (B, L, V).

        Padding ids (>= vocab size) are fed as token 0; they only influence
        states past the end of the row.
        """
        tokens = np.where(token_matrix >= self.vocab_size, 0, token_matrix)
        b, length = tokens.shape
        if length > self.t_max:
            raise ValueError(f"sequence length {length} exceeds t_max {self.t_max}")
        state = self.initial_state(b)
        outs = []
        for t in range(length):
            inp = np.full(b, self.start_id) if t == 0 else tokens[:, t - 1]
            q, state = self.step(params, state, t, inp)
            outs.append(q)
        return F.stack(outs, axis=1)

    def q_row(self, params, prefix: Sequence[int]) -> np.ndarray:
        prefix = list(prefix)
        if len(prefix) >= self.t_max:
            raise ValueError(f"prefix length {len(prefix)} must be < t_max {self.t_max}")
        for i in prefix:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"invalid token id {i}")
        state = self.initial_state(1)
        q = None
        for t in range(len(prefix) + 1):
            inp = [self.start_id] if t == 0 else [prefix[t - 1]]
            q, state = self.step(params, state, t, inp)
        return np.asarray(F.value(q))[0]

    def policy_table(self, params, task) -> dict:
        """Policy row for every non-terminal prefix of ``task`` (tiny tasks only)."""
        table = {}

        def visit(prefix, state):
            t = len(prefix)
            inp = [self.start_id] if t == 0 else [prefix[-1]]
            q, new_state = self.step(params, state, t, inp)
            q = np.asarray(q)[0]
            table[prefix] = q
            for a in range(self.vocab_size):
                child = prefix + (a,)
                if not task.is_terminal(child):
                    visit(child, new_state)

        visit((), self.initial_state(1))
        return table


def policy_from_q(q_row) -> np.ndarray:
    q = np.asarray(q_row, dtype=float)
    e = np.exp(q - q.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def state_value(q_row):
    q = np.asarray(q_row, dtype=float)
    m = q.max(axis=-1)
    return m + np.log(np.exp(q - m[..., None]).sum(axis=-1))


def advantage(q_row) -> np.ndarray:
    q = np.asarray(q_row, dtype=float)
    return q - np.asarray(state_value(q))[..., None]


# -- target network -----------------------------------------------------------


@dataclass
class TargetModel:
    params: dict
    rho: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


def polyak_update(target: TargetModel, live: dict) -> TargetModel:
    if set(target.params) != set(live):
        raise ValueError("target and live parameters have different names")
    rho = target.rho
    new = {}
    for name, tv in target.params.items():
        lv = np.asarray(live[name])
        if np.shape(tv) != lv.shape:
            raise ValueError(f"shape mismatch for {name}: {np.shape(tv)} vs {lv.shape}")
        new[name] = rho * tv + (1.0 - rho) * lv
    return TargetModel(new, rho)


def copy_params(params: dict) -> dict:
    return {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}


# -- checkpoints --------------------------------------------------------------


def params_to_json(params: dict) -> dict:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in params.items()}


def params_from_json(raw: dict) -> dict:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in raw.items()}


def save_checkpoint(path, model: QModel, params, target: TargetModel, step: int, seed: int,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "config": asdict(model.config),
        "vocab_size": model.vocab_size,
        "t_max": model.t_max,
        "params": params_to_json(params),
        "target_params": params_to_json(target.params),
        "rho": target.rho,
        "step": step,
        "seed": seed,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        raw = json.load(fh)
    model = QModel(ModelConfig(**raw["config"]), raw["vocab_size"], raw["t_max"])
    params = params_from_json(raw["params"])
    target = TargetModel(params_from_json(raw["target_params"]), raw.get("rho", 0.999))
    return model, params, target, raw
