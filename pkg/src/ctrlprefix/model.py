"""Frozen base transformer plus everything trained on top of it."""
from __future__ import annotations

import copy
import hashlib
from typing import Sequence

import numpy as np

from . import tensor as T
from .guidance import AttributeSchema, Guidance
from .prefix import PrefixBank, PrefixConfig
from .reparam import fold as fold_bank
from .tensor import Parameter, Tensor
from .transformer import ModelConfig, Seq2SeqTransformer
from .vocab import Vocab, pad_batch


class ControlTokens:
    """One trainable input embedding per attribute label (plus OOV), prepended to the encoder input."""

    def __init__(self, schema: AttributeSchema, d: int, rng: np.random.Generator | None = None,
                 tables: dict[str, np.ndarray] | None = None):
        self.schema = schema
        self.tables: dict[str, Parameter] = {}
        for attr in schema:
            if tables is not None:
                data = tables[attr.name]
            else:
                data = rng.normal(0.0, 1.0 / np.sqrt(d), (len(attr.all_labels), d))
            self.tables[attr.name] = Parameter(data, f"ctl_token.{attr.name}")

    def parameters(self) -> list[Parameter]:
        return list(self.tables.values())

    def embeds(self, label_ids: Sequence[Sequence[int]]) -> Tensor | None:
        if not len(self.schema):
            return None
        ids = np.asarray(label_ids, dtype=np.int64)
        cols = [T.reshape(T.take_rows(self.tables[a.name], ids[:, j]), (len(ids), 1, -1))
                for j, a in enumerate(self.schema)]
        return T.concat(cols, axis=1)


class ControlPrefixModel:
    """A frozen :class:`Seq2SeqTransformer` steered by a :class:`PrefixBank`.

    With ``control_tokens`` set, the bank carries only the general prefix and
    guidance enters as prepended input embeddings instead (the control-token
    baseline).
    """

    def __init__(
        self,
        base: Seq2SeqTransformer,
        vocab: Vocab,
        schema: AttributeSchema,
        bank: PrefixBank,
        control_tokens: ControlTokens | None = None,
        prefix_config: PrefixConfig | None = None,
    ):
        self.base = base
        self.vocab = vocab
        self.schema = schema
        self.bank = bank
        self.control_tokens = control_tokens
        self.prefix_config = prefix_config or PrefixConfig()
        base.freeze()

    @classmethod
    def create(
        cls,
        base: Seq2SeqTransformer,
        vocab: Vocab,
        schema: AttributeSchema,
        prefix: PrefixConfig,
        rng: np.random.Generator,
        trainable_tokens: Sequence[str] = (),
        control_tokens: bool = False,
    ) -> "ControlPrefixModel":
        bank_schema = AttributeSchema() if control_tokens else schema
        bank = PrefixBank.create(bank_schema, base.config, prefix, rng)
        ctl = ControlTokens(schema, base.config.d, rng) if control_tokens else None
        model = cls(base, vocab, schema, bank, ctl, prefix)
        base.set_trainable_tokens(vocab.ids(trainable_tokens))
        return model

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    # ------------------------------------------------------------ parameters

    def trainable_parameters(self) -> list[Parameter]:
        out = [p for p in self.bank.parameters() if not p.frozen]
        if self.control_tokens is not None:
            out += self.control_tokens.parameters()
        special = self.base.params.get("embed.special")
        if special is not None:
            out.append(special)
        return out

    def frozen_parameters(self) -> list[Parameter]:
        return self.base.base_parameters()

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.frozen_parameters(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def trainable_checksum(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.trainable_parameters(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def fold(self) -> "ControlPrefixModel":
        """Copy of this model whose bank holds expanded prefixes and no expanders."""
        if self.bank.folded:
            return self
        return ControlPrefixModel(self.base, self.vocab, self.schema, fold_bank(self.bank), self.control_tokens,
                                  self.prefix_config)

    # --------------------------------------------------------------- forward

    def logits(self, src: np.ndarray, src_mask: np.ndarray, tgt_in: np.ndarray,
               label_ids: Sequence[Sequence[int]]) -> Tensor:
        prefixes = self.bank.materialize_batch(self._bank_ids(label_ids))
        extra = self.control_tokens.embeds(label_ids) if self.control_tokens is not None else None
        return self.base.forward(src, src_mask, tgt_in, prefixes, extra)

    @property
    def special_tokens(self) -> list[str]:
        return [self.vocab.tokens[i] for i in self.base.special_ids]

    def _bank_ids(self, label_ids):
        if self.control_tokens is not None:
            return [()] * len(label_ids)
        return label_ids

    def encode(self, src: np.ndarray, src_mask: np.ndarray, label_ids, prefixes=None):
        if prefixes is None:
            prefixes = self.bank.materialize_batch(self._bank_ids(label_ids))
        extra = self.control_tokens.embeds(label_ids) if self.control_tokens is not None else None
        memory, mask = self.base.encode(src, src_mask, prefixes, extra)
        return memory, mask, prefixes


def forward(model: ControlPrefixModel, x: Sequence[int], y: Sequence[int], guidance: Guidance) -> Tensor:
    """Teacher-forced logits (len(y) x vocab) for one example.

    ``y`` is the target token sequence; the decoder input is ``<s>`` followed by
    ``y[:-1]``.
    """
    ids = guidance.label_ids(model.schema)
    src, mask = pad_batch([list(x)])
    tgt_in = np.array([[model.vocab.bos_id] + list(y)[:-1]], dtype=np.int64)
    out = model.logits(src, mask, tgt_in, [ids])
    return T.reshape(out, out.shape[1:])


def control_token_baseline(model: ControlPrefixModel, schema: AttributeSchema | None = None,
                           rng: np.random.Generator | None = None) -> ControlPrefixModel:
    """Variant of ``model`` where guidance enters as prepended control-token embeddings.

    The general prefix and expanders start from ``model``'s current values;
    one embedding per label (plus OOV) is added for each attribute.  The
    frozen base is shared, minus any trainable special-token rows.
    """
    if model.bank.folded:
        raise ValueError("build the baseline from an unfolded model")
    schema = model.schema if schema is None else schema
    rng = rng if rng is not None else np.random.default_rng(0)
    bank = PrefixBank.create(AttributeSchema(), model.config, model.prefix_config, rng)
    source = {p.name: p for p in model.bank.parameters()}
    for p in bank.parameters():
        p.data = source[p.name].data.copy()
    base = copy.copy(model.base)
    base.params = dict(model.base.params)
    base.set_trainable_tokens([])
    return ControlPrefixModel(base, model.vocab, schema, bank, ControlTokens(schema, model.config.d, rng),
                              model.prefix_config)
