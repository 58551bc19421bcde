"""Synthetic controllable datasets.

``gen_toy_d2t`` renders random triple sets with a category-specific surface
template.  Triples are drawn independently of the category, so the target is
not recoverable from the input alone.  ``gen_length_task`` pairs token
sequences with truncated or cyclically extended copies of themselves.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .guidance import N_RATIO_BINS, discretize_ratio
from .utils import derive_rng

TASK_PROMPT = "translate Graph to English:"

# category -> template over subject {s}, predicate {p}, object {o}
TEMPLATES = {
    "Airport": "{s} {p} {o} .",
    "SportsTeam": "{o} {p} for {s} .",
    "Food": "{s} has {p} {o} .",
    "Building": "the {p} of {s} is {o} .",
    "City": "{s} , {p} : {o} .",
    "WrittenWork": "{o} is {p} by {s} .",
}
SEEN_CATEGORIES = tuple(TEMPLATES)
# unseen category -> seen category whose template it shares
UNSEEN_CATEGORIES = {
    "Athlete": "SportsTeam",
    "Monument": "Building",
    "Airline": "Airport",
    "Dish": "Food",
    "Town": "City",
    "Novel": "WrittenWork",
}

N_ENTITIES = 24
N_PREDICATES = 8


@dataclass
class ToyExample:
    input: str
    output: str
    attrs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"input": self.input, "output": self.output, "attrs": self.attrs},
                          sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyExample":
        if not isinstance(d, dict) or "input" not in d:
            raise ValueError("record needs an 'input' field")
        return cls(str(d["input"]), str(d.get("output", "")), dict(d.get("attrs", {})))


@dataclass
class TripleSet:
    triples: list[tuple[str, str, str]]
    category: str = ""

    def __post_init__(self):
        if not self.triples:
            raise ValueError("a triple set needs at least one triple")


def linearize_triples(ts: TripleSet) -> str:
    if not ts.triples:
        raise ValueError("empty triple set")
    parts = [TASK_PROMPT]
    for s, p, o in ts.triples:
        parts += ["<H>", s, "<R>", p, "<T>", o]
    return " ".join(parts)


def parse_linearized(text: str) -> list[tuple[str, str, str]]:
    """Inverse of :func:`linearize_triples` (ignores the task prompt)."""
    body = text[len(TASK_PROMPT):] if text.startswith(TASK_PROMPT) else text
    triples = []
    for chunk in body.split("<H>")[1:]:
        s, rest = chunk.split("<R>", 1)
        p, o = rest.split("<T>", 1)
        triples.append((s.strip(), p.strip(), o.strip()))
    return triples


def realize(ts: TripleSet, category: str) -> str:
    template = TEMPLATES[UNSEEN_CATEGORIES.get(category, category)]
    return " ".join(template.format(s=s, p=p, o=o) for s, p, o in ts.triples)


def random_tripleset(rng: np.random.Generator, max_triples: int = 3) -> TripleSet:
    n = int(rng.integers(1, max_triples + 1))
    triples = []
    for _ in range(n):
        s, o = rng.choice(N_ENTITIES, size=2, replace=False)
        p = int(rng.integers(N_PREDICATES))
        triples.append((f"e{s}", f"r{p}", f"e{o}"))
    return TripleSet(triples)


@dataclass
class D2TDataset:
    seen: list[ToyExample]
    unseen: list[ToyExample]
    categories: tuple[str, ...]
    unseen_categories: tuple[str, ...]


def gen_toy_d2t(seed: int, n: int, R: int = 4, n_unseen: int | None = None, max_triples: int = 3) -> D2TDataset:
    """``n`` seen-category examples over ``R`` categories plus an unseen-category split."""
    if n < 1 or not 2 <= R <= len(SEEN_CATEGORIES):
        raise ValueError(f"need n >= 1 and 2 <= R <= {len(SEEN_CATEGORIES)}")
    cats = SEEN_CATEGORIES[:R]
    unseen_cats = tuple(u for u, s in UNSEEN_CATEGORIES.items() if s in cats)
    n_unseen = max(1, n // 4) if n_unseen is None else n_unseen

    def make(rng, cat):
        ts = random_tripleset(rng, max_triples)
        ts.category = cat
        return ToyExample(linearize_triples(ts), realize(ts, cat), {"category": cat})

    rng = derive_rng(seed, "toy_d2t.seen")
    seen = [make(rng, cats[int(rng.integers(R))]) for _ in range(n)]
    rng = derive_rng(seed, "toy_d2t.unseen")
    unseen = [make(rng, unseen_cats[int(rng.integers(len(unseen_cats)))]) for _ in range(n_unseen)]
    return D2TDataset(seen, unseen, cats, unseen_cats)


def candidate_targets(example: ToyExample, categories: Sequence[str]) -> set[str]:
    """Every target the generator could have produced for this input under any category."""
    ts = TripleSet(parse_linearized(example.input))
    return {realize(ts, c) for c in categories}


def gen_length_task(seed: int, n: int, min_src: int = 20, max_src: int = 28, n_symbols: int = 16,
                    max_ratio: float = 1.1) -> list[ToyExample]:
    """Copy task whose target holds ``k`` tokens, ``k`` uniform on ``1..floor(max_ratio * len(source))``.

    Realised ratios ``k / len(source)`` are therefore uniform over the grid a
    source length allows and never leave ``(0, max_ratio]``; ``len_ratio``
    stores the realised ratio exactly.  Sources of 20+ tokens keep every
    0.05-wide ratio bin realisable: with 10 tokens, say, no target lands in
    [0.75, 0.8) and that bin would never be trained at that length.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = derive_rng(seed, "length_task")
    out = []
    for _ in range(n):
        m = int(rng.integers(min_src, max_src + 1))
        src = [f"w{int(t)}" for t in rng.integers(n_symbols, size=m)]
        k = int(rng.integers(1, math.floor(max_ratio * m + 1e-9) + 1))
        out.append(length_example(src, k))
    return out


def length_example(src: Sequence[str], k: int) -> ToyExample:
    m = len(src)
    tgt = [src[i % m] for i in range(k)]
    return ToyExample(" ".join(src), " ".join(tgt), {"len_ratio": k / m})


LENGTH_CUES = tuple(f"<len{b}>" for b in range(N_RATIO_BINS))


def with_length_cues(examples: Sequence[ToyExample], fraction: float, seed: int,
                     attr: str = "len_ratio") -> list[ToyExample]:
    """Copies of ``examples``; a random ``fraction`` get their length bin appended as a source token.

    Only meant for pretraining a base model.  The cue goes last so the
    positions of the real source tokens do not move, and a base trained on a
    mix of cued and plain inputs learns a length mechanism that prefixes can
    later drive without any cue present.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    rng = derive_rng(seed, "length_cues")
    out = []
    for ex in examples:
        text = ex.input
        if rng.random() < fraction:
            text = f"{text} {LENGTH_CUES[discretize_ratio(ex.attrs[attr])]}"
        out.append(ToyExample(text, ex.output, dict(ex.attrs)))
    return out


def length_queries(sources: Iterable[str], ratios: Sequence[float]) -> list[ToyExample]:
    """One query per (source, requested ratio); the reference output realises the ratio exactly."""
    out = []
    for src in sources:
        toks = src.split()
        for r in ratios:
            ex = length_example(toks, max(1, int(round(r * len(toks)))))
            ex.attrs = {"len_ratio": float(r)}
            out.append(ex)
    return out


# ------------------------------------------------------------------- JSONL io

def write_jsonl(examples: Iterable[ToyExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[ToyExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ToyExample.from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def split(examples: Sequence, fractions: Sequence[float], seed: int) -> list[list]:
    """Deterministic shuffled split into consecutive chunks of the given fractions."""
    idx = derive_rng(seed, "split").permutation(len(examples))
    out, start = [], 0
    for i, f in enumerate(fractions):
        end = len(examples) if i == len(fractions) - 1 else start + int(round(f * len(examples)))
        out.append([examples[j] for j in idx[start:end]])
        start = end
    return out
