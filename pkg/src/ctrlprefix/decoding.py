"""Greedy and beam-search decoding.

Both searches work on a ``step_fn(prefixes) -> log-probs`` callback so the same
code drives real models and the tiny scoring tables used in tests.

Conventions shared by every search here:

* a hypothesis is the list of generated tokens, without ``<s>``;
* EOS is banned while fewer than ``min_len`` tokens have been generated;
* a hypothesis holding ``max_len`` tokens is finished without scoring an EOS;
* the normalised score is ``logprob / n ** ln_alpha`` with ``n`` the number of
  scored tokens (generated tokens plus a naturally emitted EOS).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 1
    ln_alpha: float = 1.0
    min_len: int = 0
    max_len: int = 32
    no_repeat_trigram: bool = False

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")

    def to_dict(self) -> dict:
        return asdict(self)


def banned_trigram_tokens(history: Sequence[int]) -> set[int]:
    """Tokens t such that (history[-2], history[-1], t) already occurs in ``history``."""
    if len(history) < 2:
        return set()
    a, b = history[-2], history[-1]
    return {history[i + 2] for i in range(len(history) - 2) if history[i] == a and history[i + 1] == b}


def block_repeat_trigrams(logits: np.ndarray, history: Sequence[int]) -> np.ndarray:
    """Copy of ``logits`` with every trigram-repeating token set to -inf."""
    out = np.array(logits, dtype=np.float64, copy=True)
    for t in banned_trigram_tokens(history):
        out[..., t] = -np.inf
    return out


def normalized(logprob: float, n: int, alpha: float) -> float:
    return logprob / (max(n, 1) ** alpha)


def _constrain(logp: np.ndarray, hyp: list[int], cfg: DecodeConfig, eos_id: int, banned: Sequence[int]) -> np.ndarray:
    out = logp.copy()
    if banned:
        out[list(banned)] = -np.inf
    if len(hyp) < cfg.min_len:
        out[eos_id] = -np.inf
    if cfg.no_repeat_trigram:
        out = block_repeat_trigrams(out, hyp)
    return out


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    n_scored: int
    score: float


def beam_search_fn(step_fn: StepFn, cfg: DecodeConfig, eos_id: int, banned: Sequence[int] = ()) -> Hypothesis:
    """Beam search over ``step_fn``; returns the best finished hypothesis.

    Live beams are ranked by raw log-probability with ties broken by beam
    order then token id.  Of the top ``beam`` candidates, EOS ones finish and
    the rest stay live.  The search stops when no live beam remains or none can still
    beat the best finished score: log-probs only fall as tokens are added, so
    ``lp / max_len ** ln_alpha`` bounds what a live beam can reach.
    """
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    k = cfg.beam
    while live:
        # hypotheses already at max_len finish without an EOS term
        still = []
        for toks, lp in live:
            if len(toks) >= cfg.max_len:
                finished.append(Hypothesis(toks, lp, len(toks), normalized(lp, len(toks), cfg.ln_alpha)))
            else:
                still.append((toks, lp))
        live = still
        if not live or (finished and _cannot_improve(live, finished, cfg)):
            break
        logp = step_fn([toks for toks, _ in live])
        cands = []
        for bi, (toks, lp) in enumerate(live):
            row = _constrain(logp[bi], toks, cfg, eos_id, banned)
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((lp + float(row[tok]), bi, int(tok)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, bi, tok in cands[:k]:
            toks = live[bi][0]
            if tok == eos_id:
                n = len(toks) + 1
                finished.append(Hypothesis(list(toks), score, n, normalized(score, n, cfg.ln_alpha)))
            else:
                new_live.append((toks + [tok], score))
        live = new_live
    if not finished:
        # every continuation was banned: fall back to the best live prefix
        toks, lp = max(live, key=lambda x: x[1]) if live else ([], 0.0)
        return Hypothesis(toks, lp, len(toks), normalized(lp, len(toks), cfg.ln_alpha))
    best = finished[0]
    for h in finished[1:]:
        if h.score > best.score:
            best = h
    return best


def _cannot_improve(live, finished: list[Hypothesis], cfg: DecodeConfig) -> bool:
    best = max(h.score for h in finished)
    bound = max(lp for _, lp in live) / (max(cfg.max_len, 1) ** max(cfg.ln_alpha, 0.0))
    return best >= bound


def greedy_fn(step_fn: StepFn, cfg: DecodeConfig, eos_id: int, banned: Sequence[int] = ()) -> Hypothesis:
    toks: list[int] = []
    lp = 0.0
    while len(toks) < cfg.max_len:
        row = _constrain(step_fn([toks])[0], toks, cfg, eos_id, banned)
        tok = int(np.argmax(row))
        if not np.isfinite(row[tok]):
            break
        lp += float(row[tok])
        if tok == eos_id:
            return Hypothesis(toks, lp, len(toks) + 1, normalized(lp, len(toks) + 1, cfg.ln_alpha))
        toks.append(tok)
    return Hypothesis(toks, lp, len(toks), normalized(lp, len(toks), cfg.ln_alpha))


def enumerate_best(step_fn: StepFn, cfg: DecodeConfig, eos_id: int, banned: Sequence[int] = ()) -> Hypothesis:
    """Exhaustive search over every admissible output; exponential, for tests only."""
    best: Hypothesis | None = None
    frontier: list[tuple[list[int], float]] = [([], 0.0)]
    while frontier:
        nxt = []
        logp = step_fn([t for t, _ in frontier])
        for (toks, lp), raw in zip(frontier, logp):
            row = _constrain(raw, toks, cfg, eos_id, banned)
            for tok in np.flatnonzero(np.isfinite(row)):
                s = lp + float(row[tok])
                if tok == eos_id:
                    cand = Hypothesis(list(toks), s, len(toks) + 1, normalized(s, len(toks) + 1, cfg.ln_alpha))
                elif len(toks) + 1 >= cfg.max_len:
                    t2 = toks + [int(tok)]
                    cand = Hypothesis(t2, s, len(t2), normalized(s, len(t2), cfg.ln_alpha))
                else:
                    nxt.append((toks + [int(tok)], s))
                    continue
                if best is None or cand.score > best.score:
                    best = cand
        frontier = nxt
    return best


# ------------------------------------------------------------ model adapters

def _model_step_fn(model, src_ids: Sequence[int], label_ids: Sequence[int]) -> StepFn:
    from .vocab import pad_batch

    src, mask = pad_batch([list(src_ids)])
    with T.no_grad():
        memory, mmask, _ = model.encode(src, mask, [tuple(label_ids)])
    cache: dict[int, dict] = {}
    bos = model.vocab.bos_id

    def step(prefixes: list[list[int]]) -> np.ndarray:
        k = len(prefixes)
        if k not in cache:
            with T.no_grad():
                cache[k] = model.bank.materialize_batch(model._bank_ids([tuple(label_ids)] * k))
        tgt = np.array([[bos] + p for p in prefixes], dtype=np.int64)
        mem = Tensor(np.repeat(memory.data, k, axis=0))
        mm = np.repeat(mmask, k, axis=0)
        with T.no_grad():
            logits = model.base.decode(tgt, mem, mm, cache[k]).data[:, -1]
        return _log_softmax(logits)

    return step


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def never_generated(model) -> tuple[int, ...]:
    v = model.vocab
    return (v.pad_id, v.bos_id, v.unk_id)


def beam_search(model, src_ids: Sequence[int], label_ids: Sequence[int], cfg: DecodeConfig) -> list[int]:
    """Decode one input with beam search; returns generated token ids (no EOS)."""
    step = _model_step_fn(model, src_ids, label_ids)
    return beam_search_fn(step, cfg, model.vocab.eos_id, never_generated(model)).tokens


def greedy_batch(model, srcs: Sequence[Sequence[int]], label_ids: Sequence[Sequence[int]],
                 cfg: DecodeConfig) -> list[list[int]]:
    """Batched greedy decoding; each row obeys the same rules as :func:`greedy_fn`."""
    from .vocab import pad_batch

    if not len(srcs):
        return []
    v = model.vocab
    banned = list(never_generated(model))
    src, mask = pad_batch([list(s) for s in srcs])
    with T.no_grad():
        memory, mmask, prefixes = model.encode(src, mask, [tuple(x) for x in label_ids])
        b = len(srcs)
        outs: list[list[int]] = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        tgt = np.full((b, 1), v.bos_id, dtype=np.int64)
        for _ in range(cfg.max_len):
            active = np.flatnonzero(~done)
            if not len(active):
                break
            sub = {key: (T.Tensor(pk.data[active]), T.Tensor(pv.data[active])) for key, (pk, pv) in prefixes.items()}
            logits = model.base.decode(tgt[active], T.Tensor(memory.data[active]), mmask[active], sub).data[:, -1]
            logp = _log_softmax(logits)
            nxt = np.full(b, v.pad_id, dtype=np.int64)
            for j, i in enumerate(active):
                row = _constrain(logp[j], outs[i], cfg, v.eos_id, banned)
                tok = int(np.argmax(row))
                if tok == v.eos_id or not np.isfinite(row[tok]):
                    done[i] = True
                else:
                    outs[i].append(tok)
                    nxt[i] = tok
                    if len(outs[i]) >= cfg.max_len:
                        done[i] = True
            tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
    return outs


def generate(model, srcs, label_ids, cfg: DecodeConfig) -> list[list[int]]:
    if cfg.beam == 1:
        return greedy_batch(model, srcs, label_ids, cfg)
    return [beam_search(model, s, l, cfg) for s, l in zip(srcs, label_ids)]
