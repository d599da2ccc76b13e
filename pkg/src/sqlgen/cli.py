"""Command line entry point: ``sqlgen {train,eval,sample,oracle,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .core import load_dataset, load_task
from .decoding import beam_search, greedy_decode, sample_sequences
from .gradcheck import gradcheck_all
from .metrics import entropy_h, heldout_nll, perplexity
from .objectives import LossWeights
from .oracle import soft_value_iteration
from .qmodel import ModelConfig, load_checkpoint, policy_from_q
from .rewards import reward
from .trainer import TrainConfig, child_rng, oracle_for, oracle_gaps, run_training

log = logging.getLogger("sqlgen")


EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_CHECK = 1, 2, 3, 4, 5


class CliError(Exception):
    code = EXIT_RUNTIME
    kind = "runtime"


class UsageError(CliError):
    code, kind = EXIT_USAGE, "usage"


class MissingFileError(CliError):
    code, kind = EXIT_MISSING, "missing_file"


class SchemaError(CliError):
    code, kind = EXIT_SCHEMA, "schema"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config -------------------------------------------------------------------

_NESTED = {"weights": LossWeights, "model": ModelConfig}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_type(key, value, default):
    if default is None:
        if value is not None and not isinstance(value, int):
            raise SchemaError(f"{key}: expected integer or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"{key}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise SchemaError(f"{key}: expected string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise SchemaError(f"{key}: expected list, got {value!r}")
        return tuple(value)
    return value


def _merge(raw: dict, cls, prefix=""):
    defaults = cls()
    out = {}
    names = {f.name for f in fields(cls)}
    for key, value in raw.items():
        full = prefix + key
        if key not in names:
            raise SchemaError(f"unknown config key {full!r}")
        default = getattr(defaults, key)
        if key in _NESTED and not prefix:
            if not isinstance(value, dict):
                raise SchemaError(f"{full}: expected object")
            value = _NESTED[key](**_merge(value, _NESTED[key], full + "."))
        else:
            value = _check_type(full, value, default)
        out[key] = value
    return out


def config_resolve(path=None, overrides=(), seed=None) -> TrainConfig:
    """Config file values over documented defaults, then ``key=value`` overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise SchemaError(f"{path}: expected a JSON object")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value: {item!r}")
        key, text = item.split("=", 1)
        parts = key.split(".")
        if len(parts) > 2 or (len(parts) == 2 and parts[0] not in _NESTED):
            raise SchemaError(f"unknown config key {key!r}")
        if len(parts) == 2:
            raw.setdefault(parts[0], {})[parts[1]] = _parse_value(text)
        else:
            raw[key] = _parse_value(text)
    if seed is not None:
        raw["seed"] = seed
    try:
        return TrainConfig(**_merge(raw, TrainConfig))
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None


# -- helpers ------------------------------------------------------------------


def _task(args):
    path = Path(args.task)
    if not path.exists():
        raise MissingFileError(f"task file not found: {path}")
    data = getattr(args, "data", None)
    if data is not None and not Path(data).exists():
        raise MissingFileError(f"dataset file not found: {data}")
    try:
        return load_task(path, data)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: {exc}") from None


def _checkpoint(path):
    if not Path(path).exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")


# -- subcommands --------------------------------------------------------------


def cmd_train(args):
    task = _task(args)
    config = config_resolve(args.config, args.set or (), args.seed)
    _, state, records = run_training(task, config, args.out, resume_from=args.resume)
    last = records[-1] if records else {}
    _emit({"steps": state.step, "out": str(args.out), "final": last})
    return 0


def cmd_eval(args):
    task = _task(args)
    model, params, _, raw = _checkpoint(args.checkpoint)
    scale = raw.get("train_config", {}).get("reward_scale", 1.0)
    gamma = raw.get("train_config", {}).get("gamma", 1.0)
    report = {"greedy_reward": greedy_decode(model, params, task, scale=scale).terminal_reward}
    for i, p in enumerate(args.p):
        rng = child_rng(args.seed, "eval", i)
        seqs, _ = sample_sequences(model, params, task, args.samples, rng, p=p)
        content = [task.content(s) for s in seqs]
        rewards = [scale * reward(task.reward_spec, c) for c in content]
        report[f"sample_reward_mean@{p}"] = float(np.mean(rewards))
        report[f"h1@{p}"] = entropy_h(content, 1)
        report[f"h2@{p}"] = entropy_h(content, 2)
    heldout = task.dataset
    if args.heldout is not None:
        if not Path(args.heldout).exists():
            raise MissingFileError(f"dataset file not found: {args.heldout}")
        heldout = load_dataset(args.heldout, task)
    if heldout:
        nll = heldout_nll(model, params, heldout, task.vocab.pad_id)
        report["nll"], report["perplexity"] = nll, perplexity(nll)
    tables = oracle_for(task, TrainConfig(gamma=gamma, reward_scale=scale))
    if tables is not None:
        report["tv_to_oracle"], report["v_err_to_oracle"] = oracle_gaps(model, params, task, tables)
    _emit(report)
    return 0


def cmd_sample(args):
    task = _task(args)
    model, params, _, raw = _checkpoint(args.checkpoint)
    scale = raw.get("train_config", {}).get("reward_scale", 1.0)
    vocab = task.vocab

    def row(seq, logprob):
        return {"tokens": [vocab.tokens[i] for i in seq], "logprob": float(logprob),
                "reward": scale * reward(task.reward_spec, task.content(seq))}

    if args.mode == "greedy":
        traj = greedy_decode(model, params, task, scale=scale)
        rows = [row(traj.token_ids, _seq_logprob(model, params, traj.token_ids))]
    elif args.mode == "beam":
        rows = [row(t.token_ids, s) for t, s in beam_search(model, params, task, args.width, scale)]
    else:
        rng = child_rng(args.seed, "eval", 0)
        seqs, logps = sample_sequences(model, params, task, args.n, rng,
                                       temperature=args.temperature, p=args.p)
        rows = [row(s, lp) for s, lp in zip(seqs, logps)]
    for r in rows:
        _emit(r)
    return 0


def _seq_logprob(model, params, ids):
    state, total = model.initial_state(1), 0.0
    for t, tok in enumerate(ids):
        q, state = model.step(params, state, t, [model.start_id if t == 0 else ids[t - 1]])
        total += float(np.log(policy_from_q(np.asarray(q)[0])[tok]))
    return total


def cmd_oracle(args):
    task = _task(args)
    tables = soft_value_iteration(task, args.gamma, args.scale)
    _emit(tables.to_json(task.vocab))
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    per_loss = {}
    for k in range(args.n_seeds):
        for (arch, name), err in gradcheck_all(args.seed + k, args.probes).items():
            per_loss[name] = max(per_loss.get(name, 0.0), err)
            worst = max(worst, err)
    _emit({"max_rel_error": worst, "per_loss": per_loss, "tolerance": args.tol})
    if worst > args.tol:
        sys.stderr.write(f"error: gradcheck: max relative error {worst:.3e} > {args.tol}\n")
        return EXIT_CHECK
    return 0


def build_parser():
    parser = _Parser(prog="sqlgen", description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 gives the fully deterministic path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--task", required=True)
    p.add_argument("--config")
    p.add_argument("--data", help="JSONL off-policy dataset (overrides the task's)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. weights.w_pg=1 (repeatable)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--task", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--heldout", help="JSONL sequences for NLL/perplexity")
    p.add_argument("--p", type=float, nargs="+", default=[1.0])
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="emit JSONL samples from a checkpoint")
    p.add_argument("--task", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["sample", "greedy", "beam"], default="sample")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("oracle", help="dump exact soft-optimal tables as JSON")
    p.add_argument("--task", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc.kind}: {exc}\n")
        return exc.code
    except (ValueError, KeyError) as exc:
        sys.stderr.write(f"error: schema: {exc}\n")
        return EXIT_SCHEMA
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"error: runtime: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
