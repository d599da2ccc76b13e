"""Terminal reward functions built from weighted components."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

KINDS = ("exact_match", "substring_bonus", "ngram_bleu", "repetition_penalty",
         "length_window", "lookup_table")


@dataclass(frozen=True)
class RewardComponent:
    kind: str
    target: tuple = ()
    references: tuple = ()
    max_n: int = 4
    min_len: int = 0
    max_len: int = 0
    table: tuple = ()  # sorted (sequence, value) pairs
    default: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward component {self.kind!r}")
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        object.__setattr__(self, "table", tuple(sorted((tuple(k), float(v)) for k, v in self.table)))
        object.__setattr__(self, "_lookup", dict(self.table))
        if self.kind == "substring_bonus" and not self.target:
            raise ValueError("substring_bonus needs a non-empty target")
        if self.kind == "ngram_bleu" and (not self.references or self.max_n < 1):
            raise ValueError("ngram_bleu needs references and max_n >= 1")
        if self.kind == "length_window" and not 0 <= self.min_len <= self.max_len:
            raise ValueError("length_window needs 0 <= min_len <= max_len")

    def __call__(self, tokens: Sequence[int]) -> float:
        tokens = tuple(tokens)
        if self.kind == "exact_match":
            return 1.0 if tokens == self.target else 0.0
        if self.kind == "substring_bonus":
            n = len(self.target)
            hit = any(tokens[i:i + n] == self.target for i in range(len(tokens) - n + 1))
            return 1.0 if hit else 0.0
        if self.kind == "ngram_bleu":
            return ngram_bleu(tokens, self.references, self.max_n)
        if self.kind == "repetition_penalty":
            return repetition_penalty(tokens)
        if self.kind == "length_window":
            return 1.0 if self.min_len <= len(tokens) <= self.max_len else 0.0
        if tokens in self._lookup:
            return self._lookup[tokens]
        if self.default is None:
            raise KeyError(f"lookup table has no entry for {tokens} and no default")
        return self.default


@dataclass(frozen=True)
class RewardSpec:
    components: tuple
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple((c, float(w)) for c, w in self.components))
        if not self.components:
            raise ValueError("reward spec needs at least one component")
        if not self.scale > 0:
            raise ValueError("reward scale must be > 0")

    def rescaled(self, factor: float) -> "RewardSpec":
        return RewardSpec(self.components, self.scale * factor)


def reward(spec: RewardSpec, tokens: Sequence[int]) -> float:
    total = 0.0
    for component, weight in spec.components:
        total += weight * component(tokens)
    return spec.scale * total


def repetition_penalty(tokens: Sequence) -> float:
    """Minus the fraction of positions repeating their predecessor."""
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return -repeats / max(1, len(tokens))


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def ngram_bleu(candidate: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing when some order has no match.

    ``max_n`` is clamped to the candidate length.
    """
    candidate = tuple(candidate)
    if not candidate:
        return 0.0
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    references = [tuple(r) for r in references]
    n_max = min(max_n, len(candidate))
    matches, totals = [], []
    for n in range(1, n_max + 1):
        counts = _ngrams(candidate, n)
        best = Counter()
        for ref in references:
            for gram, c in _ngrams(ref, n).items():
                best[gram] = max(best[gram], c)
        matches.append(sum(min(c, best[g]) for g, c in counts.items()))
        totals.append(sum(counts.values()))
    if min(matches) == 0:
        matches = [m + 1 for m in matches]
        totals = [t + 1 for t in totals]
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n_max

    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda n: (abs(n - c), n))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def filter_dataset_by_reward(dataset, spec: Optional[RewardSpec], threshold: float, task=None):
    """Keep trajectories whose reward is at least ``threshold``, in order.

    With ``spec`` given rewards are recomputed on the (eos-stripped) content;
    otherwise the stored ``terminal_reward`` is used.
    """
    kept = []
    for traj in dataset:
        if spec is None:
            r = traj.terminal_reward
        else:
            ids = task.content(traj.token_ids) if task is not None else traj.token_ids
            r = reward(spec, ids)
        if r >= threshold:
            kept.append(traj)
    return kept


# -- JSON ---------------------------------------------------------------------


def _ids(tokens, vocab):
    from .core import encode

    if isinstance(tokens, str):
        tokens = tokens.split()
    return tuple(encode(tokens, vocab))


def reward_spec_from_json(raw: dict, vocab) -> RewardSpec:
    comps = []
    for item in raw.get("components", []):
        item = dict(item)
        kind = item.pop("kind")
        weight = float(item.pop("weight", 1.0))
        kwargs = {}
        if "target" in item:
            kwargs["target"] = _ids(item.pop("target"), vocab)
        if "references" in item:
            kwargs["references"] = tuple(_ids(r, vocab) for r in item.pop("references"))
        if "table" in item:
            kwargs["table"] = tuple((_ids(k, vocab), v) for k, v in item.pop("table").items())
        for key in ("max_n", "min_len", "max_len"):
            if key in item:
                kwargs[key] = int(item.pop(key))
        if "default" in item:
            kwargs["default"] = float(item.pop("default"))
        if item:
            raise KeyError(f"unknown keys for {kind} component: {sorted(item)}")
        comps.append((RewardComponent(kind, **kwargs), weight))
    return RewardSpec(tuple(comps), float(raw.get("scale", 1.0)))


def reward_spec_to_json(spec: RewardSpec, vocab) -> dict:
    def toks(ids):
        return [vocab.tokens[i] for i in ids]

    out = []
    for comp, weight in spec.components:
        item = {"kind": comp.kind, "weight": weight}
        if comp.kind in ("exact_match", "substring_bonus"):
            item["target"] = toks(comp.target)
        elif comp.kind == "ngram_bleu":
            item["references"] = [toks(r) for r in comp.references]
            item["max_n"] = comp.max_n
        elif comp.kind == "length_window":
            item["min_len"], item["max_len"] = comp.min_len, comp.max_len
        elif comp.kind == "lookup_table":
            item["table"] = {" ".join(toks(k)): v for k, v in comp.table}
            if comp.default is not None:
                item["default"] = comp.default
        out.append(item)
    return {"scale": spec.scale, "components": out}
