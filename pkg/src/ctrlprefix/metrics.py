"""Corpus BLEU, sequence accuracy, length-ratio compliance and a guidance-necessity audit."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with brevity penalty.

    Orders n >= 2 get add-one smoothing (numerator and denominator); unigram
    precision is left unsmoothed so a corpus with no overlap scores exactly 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if n > 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def sequence_accuracy(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    return sum(h.split() == r.split() for h, r in zip(hypotheses, references)) / len(hypotheses)


def length_compliance(
    outputs: Sequence[str],
    sources: Sequence[str],
    targets: Sequence[float],
    tolerance: float = 0.1,
    bin_width: float = 0.05,
) -> dict:
    """Realised length ratios, overall/per-target compliance and a per-target histogram."""
    if not len(outputs) == len(sources) == len(targets):
        raise ValueError("outputs, sources and targets must align")
    ratios = []
    for out, src in zip(outputs, sources):
        n = len(src.split())
        if n == 0:
            raise ValueError("zero-length source")
        ratios.append(len(out.split()) / n)
    ok = [abs(r - t) <= tolerance + 1e-12 for r, t in zip(ratios, targets)]
    per_target: dict[float, dict] = {}
    groups: dict[float, list[int]] = defaultdict(list)
    for i, t in enumerate(targets):
        groups[float(t)].append(i)
    for t, idx in sorted(groups.items()):
        hist = Counter(round(math.floor(ratios[i] / bin_width + 1e-9) * bin_width, 10) for i in idx)
        per_target[t] = {
            "n": len(idx),
            "compliance": sum(ok[i] for i in idx) / len(idx),
            "mean_ratio": float(np.mean([ratios[i] for i in idx])),
            "histogram": dict(sorted(hist.items())),
        }
    return {
        "ratios": ratios,
        "compliance": sum(ok) / len(ok) if ok else 0.0,
        "per_target": per_target,
    }


def input_only_accuracy(train_inputs, train_labels, test_inputs, test_labels, alpha: float = 1.0) -> float:
    """Held-out accuracy of a multinomial naive-Bayes classifier that sees only the input tokens."""
    labels = sorted(set(train_labels))
    prior = Counter(train_labels)
    counts = {lab: Counter() for lab in labels}
    for x, y in zip(train_inputs, train_labels):
        counts[y].update(x.split())
    vocab = set().union(*counts.values())
    totals = {lab: sum(c.values()) for lab, c in counts.items()}
    correct = 0
    for x, y in zip(test_inputs, test_labels):
        best, best_lp = None, -math.inf
        for lab in labels:
            lp = math.log(prior[lab] / len(train_labels))
            denom = totals[lab] + alpha * (len(vocab) + 1)
            for tok in x.split():
                lp += math.log((counts[lab][tok] + alpha) / denom)
            if lp > best_lp:
                best, best_lp = lab, lp
        correct += best == y
    return correct / len(test_labels)
