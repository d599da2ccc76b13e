"""Finite-difference audit of every training loss on random small models."""
from __future__ import annotations

import numpy as np

from . import diffengine as F
from .core import Trajectory, pad_batch
from .objectives import COMPONENTS, prepare
from .qmodel import ModelConfig, QModel


def random_problem(rng: np.random.Generator, arch: str):
    vocab_size = int(rng.integers(3, 6))
    t_max = int(rng.integers(3, 6))
    # sizes keep every model above 50 parameters so 50 probes hit distinct coordinates
    config = ModelConfig(arch=arch, embed_dim=int(rng.integers(2, 6)),
                         hidden_dim=int(rng.integers(4, 9)), init_scale=0.5)
    model = QModel(config, vocab_size, t_max)
    params = model.init_params(rng)
    target = model.init_params(rng)
    trajs = []
    for _ in range(int(rng.integers(2, 5))):
        n = int(rng.integers(1, t_max + 1))
        trajs.append(Trajectory(rng.integers(0, vocab_size, size=n), float(rng.normal())))
    batch = pad_batch(trajs, vocab_size)
    gamma = float(rng.uniform(0.5, 1.0))
    return model, params, target, batch, gamma


def loss_fn_for(name, model, target, batch, gamma, baseline=0.0):
    def fn(p):
        prep = prepare(model, p, target, batch, gamma)
        return prep.pg(baseline) if name == "pg" else getattr(prep, name)()

    return fn


def gradcheck_all(seed: int, n_probes: int = 50, step: float = 1e-5) -> dict:
    """Max relative error per ``(arch, loss)`` for one seed."""
    results = {}
    for k, arch in enumerate(("recurrent_cell", "fixed_window_mlp")):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        model, params, target, batch, gamma = random_problem(rng, arch)
        baseline = float(rng.normal())
        for name in COMPONENTS:
            fn = loss_fn_for(name, model, target, batch, gamma, baseline)
            results[(arch, name)] = F.finite_diff_check(fn, params, n_probes, step, rng)
    return results
