"""End-to-end acceptance runs, one test group per numbered criterion.

Long-running: the whole module takes several minutes on one core.  Results
are also written as JSON under ``acceptance_output/``.
"""
import functools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from helpers import all_episodes

from sqlgen.cli import main as cli_main
from sqlgen.core import Trajectory, dump_dataset, pad_batch, task_to_json
from sqlgen.decoding import beam_search, exhaustive_argmax, greedy_decode, rollout, sample_sequences
from sqlgen.gradcheck import gradcheck_all
from sqlgen.objectives import LossWeights, prepare
from sqlgen.oracle import exact_policy_return, soft_value_iteration
from sqlgen.qmodel import ModelConfig, QModel, policy_from_q
from sqlgen.rewards import filter_dataset_by_reward, reward
from sqlgen.tasks import ab_task, bleu_task, lookup_task, noisy_task, sparse_task
from sqlgen.trainer import TrainConfig, child_rng, run_training

pytestmark = pytest.mark.acceptance

OUT = Path(__file__).resolve().parents[1] / "acceptance_output"
SEEDS = range(5)


def dump(name, payload):
    OUT.mkdir(exist_ok=True)
    (OUT / name).write_text(json.dumps(payload, indent=2))


def policy_of(model, params, task):
    return {p: policy_from_q(q) for p, q in model.policy_table(params, task).items()}


# -- configurations ---------------------------------------------------------------

ORACLE_TASKS = {
    "ab": (ab_task, dict(steps=10_000)),
    "lookup": (lookup_task, dict(steps=10_000)),
    "bleu": (bleu_task, dict(steps=20_000, lr=3e-3)),
}

SCALES = (1.0, 10.0, 100.0)
NO_VALUE = dict(w_pcl_single=0.0, w_pcl_multi=0.0, w_sql_vanilla=0.0)


def scale_configs(scale):
    common = dict(steps=5000, lr=3e-3, reward_scale=scale, eval_every=250, eval_samples=50)
    return {
        "sql": TrainConfig(**common),
        "mle_pg": TrainConfig(**common, batch_off=16, batch_on=16,
                              weights=LossWeights(**NO_VALUE, w_mle=1.0, w_pg=1.0)),
    }


def ab_with_uniform_data():
    task = ab_task()
    return task.with_dataset([Trajectory(s, reward(task.reward_spec, s)) for s in all_episodes(task)])


def noisy_configs(seed):
    mle = dict(steps=3000, lr=3e-3, batch_off=32, batch_on=0, eval_every=500, eval_samples=50,
               weights=LossWeights(**NO_VALUE, w_mle=1.0), seed=seed)
    sql = dict(steps=5000, lr=3e-3, batch_off=16, batch_on=16, warmup_steps=1000,
               reward_scale=5.0, eval_every=500, eval_samples=50, seed=seed)
    return {"mle": TrainConfig(**mle), "mle_reward": TrainConfig(**mle), "sql": TrainConfig(**sql)}


def noisy_tasks():
    task = noisy_task()
    median = float(np.median([t.terminal_reward for t in task.dataset]))
    filtered = task.with_dataset(filter_dataset_by_reward(task.dataset, None, median))
    return {"mle": task, "mle_reward": filtered, "sql": task}


SPARSE_WEIGHTS = {
    "full": LossWeights(w_pcl_single=1.0, w_pcl_multi=1.0, w_sql_vanilla=0.0),
    "single": LossWeights(w_pcl_single=1.0, w_pcl_multi=0.0, w_sql_vanilla=0.0),
    "vanilla": LossWeights(w_pcl_single=0.0, w_pcl_multi=0.0, w_sql_vanilla=1.0),
}


def sparse_config(kind, seed, steps=6000):
    return TrainConfig(steps=steps, lr=3e-3, reward_scale=10.0, batch_on=16, eval_every=50,
                       eval_samples=10, weights=SPARSE_WEIGHTS[kind], seed=seed)


@functools.lru_cache(maxsize=None)
def trained(name):
    make, kw = ORACLE_TASKS[name]
    task = make()
    start = time.perf_counter()
    model, state, records = run_training(task, TrainConfig(eval_every=1000, **kw))
    return task, model, state, records, time.perf_counter() - start


# -- 1, 2: oracle agreement and consistency -------------------------------------------


@pytest.mark.criterion(1)
@pytest.mark.parametrize("name", list(ORACLE_TASKS))
def test_oracle_agreement(name, detail):
    task, model, state, records, seconds = trained(name)
    final = records[-1]
    detail(f"{name}: tv={final['tv_to_oracle']:.4f} v_err={final['v_err_to_oracle']:.4f} "
           f"{seconds:.0f}s")
    assert task.vocab.size <= 5 and task.t_max <= 4
    assert final["tv_to_oracle"] <= 0.05
    assert final["v_err_to_oracle"] <= 0.1
    assert seconds <= 300


def test_oracle_tasks_include_negative_rewards():
    task = lookup_task()
    assert min(reward(task.reward_spec, task.content(e)) for e in all_episodes(task)) < 0


@pytest.mark.criterion(2)
@pytest.mark.parametrize("name", list(ORACLE_TASKS))
def test_consistency_residual(name, detail):
    task, model, state, _, _ = trained(name)
    trajs = rollout(model, state.params, task, 1000, child_rng(0, "eval", 10**6))
    prep = prepare(model, state.params, state.target, pad_batch(trajs, task.vocab.pad_id), 1.0)
    res = np.asarray(prep.pcl_single_residual())
    msr = float((res ** 2 * prep.mask).sum() / prep.mask.sum())
    detail(f"{name}: {msr:.2e}")
    assert msr <= 1e-3


# -- 3, 4: gradients and telescoping ----------------------------------------------------


@pytest.mark.criterion(3)
def test_gradcheck_five_seeds(detail):
    worst = 0.0
    for seed in SEEDS:
        errs = gradcheck_all(seed, n_probes=50, step=1e-5)
        assert len(errs) == 12
        worst = max(worst, max(errs.values()))
    detail(f"max rel err {worst:.2e}")
    assert worst <= 1e-4


def telescoping_deviation(n_triples=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_triples):
        v, t_max = int(rng.integers(2, 6)), int(rng.integers(1, 9))
        model = QModel(ModelConfig(embed_dim=4, hidden_dim=6, init_scale=1.0), v, t_max)
        params, target = model.init_params(rng), model.init_params(rng)
        n = int(rng.integers(1, t_max + 1))
        traj = Trajectory(rng.integers(0, v, size=n), float(rng.normal(scale=3)))
        gamma = float(rng.uniform(0.05, 1.0))
        prep = prepare(model, params, target, pad_batch([traj], v), gamma)
        single = np.asarray(prep.pcl_single_residual())[0]
        multi = np.asarray(prep.pcl_multi_residual())[0]
        for t in range(n):
            expect = sum(gamma ** l * single[t + l] for l in range(n - t))
            worst = max(worst, abs(multi[t] - expect))
    return worst


@pytest.mark.criterion(4)
def test_telescoping_identity(detail):
    worst = telescoping_deviation()
    detail(f"max dev {worst:.1e}")
    assert worst <= 1e-10


# -- 5: reward scale ----------------------------------------------------------------------


@pytest.mark.criterion(5)
def test_reward_scale_robustness(detail):
    curves, ratios = {}, {}
    for scale in SCALES:
        v_star = soft_value_iteration(ab_task(), scale=scale).v_star[()]
        for method, config in scale_configs(scale).items():
            task = ab_with_uniform_data() if method == "mle_pg" else ab_task()
            _, _, records = run_training(task, config)
            curves[f"{method}@{scale:g}"] = {
                "v_star": v_star,
                "steps": [r["step"] for r in records],
                "soft_return": [r["soft_return"] for r in records],
                "expected_reward": [r["expected_reward"] for r in records],
            }
            ratios[f"{method}@{scale:g}"] = records[-1]["soft_return"] / v_star
    dump("criterion5_curves.json", curves)
    detail(", ".join(f"{k}={v:.3f}" for k, v in ratios.items()))
    for scale in SCALES:
        assert ratios[f"sql@{scale:g}"] >= 0.95


# -- 6: noisy data ---------------------------------------------------------------------------


@pytest.mark.criterion(6)
def test_noisy_data_orderings(detail):
    tasks = noisy_tasks()
    rewards = [t.terminal_reward for t in tasks["mle"].dataset]
    data_mean, r_max = float(np.mean(rewards)), 1.0
    assert data_mean <= 0.5 * r_max
    assert np.mean(np.array(rewards) < 0) > 2 / 5
    rows, good = [], 0
    for seed in SEEDS:
        row = {"seed": seed}
        for method, config in noisy_configs(seed).items():
            task = tasks[method]
            model, state, _ = run_training(task, config)
            expected, _ = exact_policy_return(task, policy_of(model, state.params, task))
            row[method + "_expected"] = float(expected)
            row[method + "_greedy"] = greedy_decode(model, state.params, task).terminal_reward
        ok = (row["sql_greedy"] >= 0.9 * r_max
              and abs(row["mle_expected"] - data_mean) <= 0.1
              and row["mle_expected"] <= row["mle_reward_expected"] <= row["sql_greedy"])
        row["orderings_hold"] = ok = bool(ok)
        good += ok
        rows.append(row)
    dump("criterion6_noisy.json", {"dataset_mean": data_mean, "runs": rows})
    detail(f"{good}/5 seeds")
    assert good >= 4


# -- 7: sparse reward ------------------------------------------------------------------------


def steps_to_success(kind, seed):
    config = sparse_config(kind, seed)
    hit = []

    def stop(step, record):
        if record["mean_reward_greedy"] >= config.reward_scale:
            hit.append(step)
            return True
        return False

    run_training(sparse_task(), config, callback=stop)
    return hit[0] if hit else math.inf


@pytest.mark.criterion(7)
def test_sparse_credit_assignment(detail):
    runs = {kind: [steps_to_success(kind, s) for s in SEEDS] for kind in SPARSE_WEIGHTS}
    wins = sum(f < s for f, s in zip(runs["full"], runs["single"]))
    dump("criterion7_sparse.json", {k: [None if math.isinf(x) else x for x in v]
                                    for k, v in runs.items()})
    fmt = lambda xs: "/".join("-" if math.isinf(x) else str(x) for x in xs)
    detail(f"full {fmt(runs['full'])} vs single {fmt(runs['single'])}, "
           f"vanilla {fmt(runs['vanilla'])}; {wins}/5")
    assert wins >= 4


# -- 8: decoding ------------------------------------------------------------------------------


@pytest.mark.criterion(8)
@pytest.mark.parametrize("name", list(ORACLE_TASKS))
def test_beam_at_saturation_is_exhaustive(name):
    task, model, state, _, _ = trained(name)
    hyps = beam_search(model, state.params, task, task.vocab.size ** task.t_max)
    seq, _ = exhaustive_argmax(model, state.params, task)
    assert hyps[0][0].token_ids == seq


def chi_square_ok(counts, probs, alpha=1e-3):
    expect = probs * counts.sum()
    small = expect < 5
    if small.sum() > 0:
        counts = np.append(counts[~small], counts[small].sum())
        expect = np.append(expect[~small], expect[small].sum())
    if len(counts) < 2:
        return True
    return chisquare(counts, expect).pvalue > alpha


@pytest.mark.criterion(8)
@pytest.mark.parametrize("name", list(ORACLE_TASKS))
def test_sampling_chi_square(name):
    task, model, state, _, _ = trained(name)
    seqs, _ = sample_sequences(model, state.params, task, 10_000, child_rng(1, "eval", 0))
    v = task.vocab.size
    first = np.bincount([s[0] for s in seqs], minlength=v)
    assert chi_square_ok(first, policy_from_q(model.q_row(state.params, [])))
    for a in range(v):
        if task.is_terminal((a,)):
            continue
        nxt = np.bincount([s[1] for s in seqs if s[0] == a], minlength=v)
        if nxt.sum() >= 100:
            assert chi_square_ok(nxt, policy_from_q(model.q_row(state.params, [a])))


# -- 9: determinism ---------------------------------------------------------------------------


def truncated(config, steps=200):
    raw = config.to_json()
    raw.update(steps=steps, eval_every=50, warmup_steps=min(config.warmup_steps, steps // 2))
    return raw


def determinism_cases():
    cases = {}
    for name, (make, kw) in ORACLE_TASKS.items():
        cases[f"c1-{name}"] = (make(), TrainConfig(eval_every=1000, **kw))
    for scale in SCALES:
        for method, config in scale_configs(scale).items():
            task = ab_with_uniform_data() if method == "mle_pg" else ab_task()
            cases[f"c5-{method}@{scale:g}"] = (task, config)
    tasks = noisy_tasks()
    for method, config in noisy_configs(0).items():
        cases[f"c6-{method}"] = (tasks[method], config)
    for kind in SPARSE_WEIGHTS:
        cases[f"c7-{kind}"] = (sparse_task(), sparse_config(kind, 0))
    return cases


def cli_train(tmp, name, task, raw, run):
    base = tmp / name
    base.mkdir(exist_ok=True)
    (base / "task.json").write_text(json.dumps(task_to_json(task)))
    (base / "config.json").write_text(json.dumps(raw))
    argv = ["--threads", "1", "train", "--task", str(base / "task.json"),
            "--config", str(base / "config.json"), "--out", str(base / f"run{run}")]
    if task.dataset:
        dump_dataset(task.dataset, task.vocab, base / "data.jsonl")
        argv += ["--data", str(base / "data.jsonl")]
    assert cli_main(argv) == 0
    return (base / f"run{run}" / "metrics.jsonl").read_bytes()


@pytest.mark.criterion(9)
def test_training_logs_are_byte_identical(tmp_path, capsys, detail):
    cases = determinism_cases()
    for name, (task, config) in cases.items():
        raw = truncated(config)
        first = cli_train(tmp_path, name, task, raw, 1)
        second = cli_train(tmp_path, name, task, raw, 2)
        assert first and first == second, name
    capsys.readouterr()
    detail(f"{len(cases)} training configs")


@pytest.mark.criterion(9)
def test_non_training_outputs_are_identical(tmp_path, capsys):
    outs = []
    for _ in range(2):
        assert cli_main(["--threads", "1", "gradcheck", "--seed", "0", "--n-seeds", "5"]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
    assert telescoping_deviation(seed=3) == telescoping_deviation(seed=3)
    path = tmp_path / "ab.json"
    path.write_text(json.dumps(task_to_json(ab_task())))
    outs = []
    for _ in range(2):
        assert cli_main(["--threads", "1", "oracle", "--task", str(path)]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]
