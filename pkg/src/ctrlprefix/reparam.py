"""Per-attention-class feed-forward expanders and the fold step.

Each compact prefix row (length d) is mapped row-wise to a full row of length
2dL holding, for every layer, the key half followed by the value half.
"""
from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .transformer import AttentionClass

if TYPE_CHECKING:
    from .prefix import PrefixBank


class ClassExpander:
    def __init__(self, cls: AttentionClass, d: int, k: int, layers: int, rng: np.random.Generator, name: str):
        self.cls = AttentionClass(cls)
        self.d, self.k, self.layers = d, k, layers
        out = 2 * d * layers
        self.w1 = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, k)), f"{name}.w1")
        self.b1 = Parameter(np.zeros(k), f"{name}.b1")
        self.w2 = Parameter(rng.normal(0.0, 1.0 / math.sqrt(k), size=(k, out)), f"{name}.w2")
        self.b2 = Parameter(np.zeros(out), f"{name}.b2")

    @property
    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def out_dim(self) -> int:
        return 2 * self.d * self.layers

    def clone(self, name: str) -> "ClassExpander":
        new = ClassExpander.__new__(ClassExpander)
        new.cls, new.d, new.k, new.layers = self.cls, self.d, self.k, self.layers
        for attr in ("w1", "b1", "w2", "b2"):
            setattr(new, attr, Parameter(getattr(self, attr).data.copy(), f"{name}.{attr}"))
        return new

    def __call__(self, compact: Tensor) -> Tensor:
        return expand(compact, self)


def expand(compact: Tensor, expander: ClassExpander) -> Tensor:
    """``W2 . tanh(W1 . row + b1) + b2`` applied to every row of a (rho, d) matrix."""
    if compact.shape[-1] != expander.d:
        raise ValueError(f"compact prefix has {compact.shape[-1]} columns, expander expects {expander.d}")
    h = T.tanh(compact @ expander.w1 + expander.b1)
    return h @ expander.w2 + expander.b2


def fold(bank: "PrefixBank") -> "PrefixBank":
    """Replace every compact prefix by its expansion and drop the expanders."""
    if bank.folded:
        raise ValueError("bank is already folded")
    from .prefix import PrefixBank

    with T.no_grad():
        general = {cls: expand(p, bank.expander_for(None, None, cls)).data.copy()
                   for cls, p in bank.general.items()}
        controls = {
            attr: {label: {cls: expand(p, bank.expander_for(attr, label, cls)).data.copy()
                           for cls, p in per_cls.items()}
                   for label, per_cls in labels.items()}
            for attr, labels in bank.controls.items()
        }
    return PrefixBank.from_arrays(bank.schema, bank.d, bank.layers, bank.rho, general, controls, folded=True)


def expander_sharing_check(bank: "PrefixBank") -> bool:
    """True iff every prefix of a class goes through the identical expander instance."""
    if bank.folded:
        return True
    for cls in bank.classes:
        shared = bank.expander_for(None, None, cls)
        for attr, labels in bank.controls.items():
            for label in labels:
                if bank.expander_for(attr, label, cls) is not shared:
                    return False
    return True
