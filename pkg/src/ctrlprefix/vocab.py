"""Whitespace tokenizer with reserved special tokens."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
TRIPLE_MARKERS = ("<H>", "<R>", "<T>")
SPECIALS = (PAD, BOS, EOS, UNK) + TRIPLE_MARKERS


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved specials")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = dict.fromkeys(SPECIALS)
        for text in texts:
            for tok in text.split():
                seen.setdefault(tok)
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, text: str, add_eos: bool = True) -> list[int]:
        ids = [self.index.get(t, self.unk_id) for t in text.split()]
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index[t] for t in tokens if t in self.index]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a (B, max_len) id array and a boolean mask of real positions."""
    n = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask
