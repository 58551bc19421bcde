"""Encoder-decoder transformer whose attention layers accept external key/value rows.

Prefix rows are injected *after* the key/value projections: for a layer with
projected keys ``K`` (M x d) and prefix keys ``PK`` (rho x d) the softmax runs
over ``[PK; K]``.  Prefix keys are visible to every query, whatever the causal
or padding mask says about the sequence keys.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class AttentionClass(str, enum.Enum):
    E = "E"    # encoder self-attention
    Dc = "Dc"  # decoder cross-attention
    Dm = "Dm"  # decoder masked self-attention


ATTENTION_CLASSES = (AttentionClass.E, AttentionClass.Dc, AttentionClass.Dm)

# (class, layer) -> (prefix_K, prefix_V), each (B, rho_total, d) or (rho_total, d)
PrefixKV = Mapping[tuple[AttentionClass, int], tuple[Tensor, Tensor]]


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    vocab: int = 64
    ffn_dim: int = 64
    rel_bias: bool = False
    max_len: int = 64
    rel_buckets: int = 16
    rel_max_distance: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.vocab < 1:
            raise ValueError("vocab must be positive")
        if self.dropout != 0.0:
            raise ValueError("dropout is not implemented; only 0.0 is accepted")

    def to_dict(self) -> dict:
        return asdict(self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    prefix: tuple[Tensor, Tensor] | None = None,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
    bias=None,
) -> Tensor:
    """Multi-head scaled dot-product attention over ``[prefix; sequence]`` keys.

    ``q`` is (B, N, d) or (N, d); ``k``/``v`` are (B, M, d) or (M, d).  ``key_mask``
    is a (B, M) boolean array marking real (non-pad) sequence keys.  ``bias`` is
    added to the scores and must broadcast to (B, heads, N, rho + M).  Returns a
    tensor with the same leading shape as ``q``.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
    b, n, d = q.shape
    m = k.shape[1]
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    if k.shape[-1] != d or v.shape != k.shape:
        raise ValueError(f"key/value shapes {k.shape}, {v.shape} do not match queries {q.shape}")

    rho = 0
    if prefix is not None:
        pk, pv = prefix
        if pk.shape[-1] != d or pv.shape != pk.shape:
            raise ValueError(f"prefix shapes {pk.shape}, {pv.shape} do not match d={d}")
        if pk.ndim == 2:
            pk = T.broadcast_to(pk, (b,) + pk.shape)
            pv = T.broadcast_to(pv, (b,) + pv.shape)
        rho = pk.shape[1]
        if rho:
            k = T.concat_rows(pk, k)
            v = T.concat_rows(pv, v)

    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.scale(qh @ T.transpose(kh), 1.0 / math.sqrt(d // heads))
    if bias is not None:
        scores = scores + bias

    mask = None
    if causal or key_mask is not None:
        seq = np.ones((b, n, m), dtype=bool)
        if causal:
            seq &= np.tril(np.ones((n, m), dtype=bool), k=m - n)
        if key_mask is not None:
            seq &= np.asarray(key_mask, dtype=bool)[:, None, :]
        mask = np.concatenate([np.ones((b, n, rho), dtype=bool), seq], axis=-1)[:, None]

    probs = T.softmax(scores, mask)
    out = _merge_heads(probs @ vh)
    if squeeze:
        out = T.reshape(out, (n, d))
    return out


def relative_position_bucket(rel: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    """T5-style log-spaced buckets for ``rel = key_pos - query_pos``."""
    ret = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(rel.dtype) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
        ).astype(rel.dtype)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(is_small, n, large)


def rel_bias_with_prefix(
    bias_table: Tensor,
    n: int,
    m: int,
    rho_total: int,
    bidirectional: bool = True,
    max_distance: int = 32,
) -> Tensor:
    """Relative-position bias for ``n`` queries over ``rho_total`` prefix keys plus ``m`` sequence keys.

    ``bias_table`` is (buckets,) or (buckets, heads).  Columns belonging to
    prefix keys are exactly zero; the result is (n, rho_total + m) or
    (heads, n, rho_total + m).
    """
    table = bias_table if bias_table.ndim == 2 else T.reshape(bias_table, (bias_table.shape[0], 1))
    buckets, heads = table.shape
    rel = np.arange(m)[None, :] - np.arange(n)[:, None]
    idx = relative_position_bucket(rel, bidirectional, buckets, max_distance)
    seq = T.transpose(T.take_rows(table, idx), (2, 0, 1))  # (heads, n, m)
    if rho_total:
        seq = T.concat([Tensor(np.zeros((heads, n, rho_total))), seq], axis=-1)
    if bias_table.ndim == 1:
        seq = T.reshape(seq, (n, rho_total + m))
    return seq


class Seq2SeqTransformer:
    """Pre-LayerNorm encoder-decoder.  ``params`` maps names to :class:`Parameter`."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Parameter] = {}
        c = config
        std = 0.02

        def p(name, shape, kind="normal", scale=std):
            if kind == "ones":
                data = np.ones(shape)
            elif kind == "zeros":
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, scale, size=shape)
            self.params[name] = Parameter(data, name)

        d, f = c.d, c.ffn_dim
        p("embed.tok", (c.vocab, d), scale=1.0 / math.sqrt(d))
        if c.rel_bias:
            p("enc.rel_bias", (c.rel_buckets, c.heads), "zeros")
            p("dec.rel_bias", (c.rel_buckets, c.heads), "zeros")
        else:
            p("embed.pos_enc", (c.max_len, d), scale=1.0 / math.sqrt(d))
            p("embed.pos_dec", (c.max_len, d), scale=1.0 / math.sqrt(d))

        def attn(prefix):
            for w in "qkvo":
                p(f"{prefix}.{w}", (d, d), scale=1.0 / math.sqrt(d))

        def ln(prefix):
            p(f"{prefix}.g", (d,), "ones")
            p(f"{prefix}.b", (d,), "zeros")

        def ffn(prefix):
            p(f"{prefix}.w1", (d, f), scale=1.0 / math.sqrt(d))
            p(f"{prefix}.b1", (f,), "zeros")
            p(f"{prefix}.w2", (f, d), scale=1.0 / math.sqrt(f))
            p(f"{prefix}.b2", (d,), "zeros")

        for layer in range(c.layers):
            ln(f"enc.{layer}.ln1")
            attn(f"enc.{layer}.attn")
            ln(f"enc.{layer}.ln2")
            ffn(f"enc.{layer}.ffn")
        ln("enc.ln_f")
        for layer in range(c.layers):
            ln(f"dec.{layer}.ln1")
            attn(f"dec.{layer}.self")
            ln(f"dec.{layer}.ln2")
            attn(f"dec.{layer}.cross")
            ln(f"dec.{layer}.ln3")
            ffn(f"dec.{layer}.ffn")
        ln("dec.ln_f")
        p("lm_head.w", (d, c.vocab), scale=1.0 / math.sqrt(d))
        p("lm_head.b", (c.vocab,), "zeros")

        # token ids whose embedding rows are trainable; see set_trainable_tokens
        self.special_ids: tuple[int, ...] = ()

    # ------------------------------------------------------------ parameters

    def base_parameters(self) -> list[Parameter]:
        return [p for name, p in self.params.items() if name != "embed.special"]

    def freeze(self) -> None:
        for p in self.base_parameters():
            p.freeze()

    def set_trainable_tokens(self, token_ids) -> None:
        """Give ``token_ids`` their own trainable embedding rows (copied from the frozen table)."""
        ids = tuple(int(i) for i in token_ids)
        self.special_ids = ids
        if ids:
            self.params["embed.special"] = Parameter(self.params["embed.tok"].data[list(ids)].copy(), "embed.special")
        else:
            self.params.pop("embed.special", None)

    # --------------------------------------------------------------- forward

    def _embed(self, ids: np.ndarray) -> Tensor:
        table = self.params["embed.tok"]
        special = self.params.get("embed.special")
        if special is None:
            return T.take_rows(table, ids)
        remap = np.asarray(ids).copy()
        for j, tok in enumerate(self.special_ids):
            remap[ids == tok] = table.shape[0] + j
        return T.take_rows(T.concat([table, special], axis=0), remap)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        P = self.params
        h = T.gelu(x @ P[f"{name}.w1"] + P[f"{name}.b1"])
        return h @ P[f"{name}.w2"] + P[f"{name}.b2"]

    def _mha(self, xq, xkv, name, prefix, causal, key_mask, bias):
        P = self.params
        q = xq @ P[f"{name}.q"]
        k = xkv @ P[f"{name}.k"]
        v = xkv @ P[f"{name}.v"]
        ctx = attention(q, k, v, self.config.heads, prefix=prefix, causal=causal, key_mask=key_mask, bias=bias)
        return ctx @ P[f"{name}.o"]

    def _rel_bias(self, table_name: str, n: int, m: int, rho: int, bidirectional: bool):
        c = self.config
        bias = rel_bias_with_prefix(self.params[table_name], n, m, rho, bidirectional, c.rel_max_distance)
        return T.reshape(bias, (1,) + bias.shape)

    def encode(
        self,
        src: np.ndarray,
        src_mask: np.ndarray,
        prefixes: PrefixKV | None = None,
        extra_embeds: Tensor | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Encode (B, S) token ids.  ``extra_embeds`` (B, k, d) are prepended without positions.

        Returns the memory (B, k + S, d) and its key mask.
        """
        c = self.config
        prefixes = prefixes or {}
        b, s = src.shape
        x = self._embed(src)
        if not c.rel_bias:
            x = x + self.params["embed.pos_enc"][:s]
        mask = np.asarray(src_mask, dtype=bool)
        if extra_embeds is not None:
            x = T.concat([extra_embeds, x], axis=1)
            mask = np.concatenate([np.ones((b, extra_embeds.shape[1]), dtype=bool), mask], axis=1)
        n = x.shape[1]
        for layer in range(c.layers):
            pre = prefixes.get((AttentionClass.E, layer))
            rho = pre[0].shape[-2] if pre is not None else 0
            bias = self._rel_bias("enc.rel_bias", n, n, rho, True) if c.rel_bias else None
            h = self._ln(x, f"enc.{layer}.ln1")
            x = x + self._mha(h, h, f"enc.{layer}.attn", pre, False, mask, bias)
            x = x + self._ffn(self._ln(x, f"enc.{layer}.ln2"), f"enc.{layer}.ffn")
        return self._ln(x, "enc.ln_f"), mask

    def decode(
        self,
        tgt_in: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        prefixes: PrefixKV | None = None,
    ) -> Tensor:
        """Teacher-forced decoder pass; returns logits (B, T, vocab)."""
        c = self.config
        prefixes = prefixes or {}
        t = tgt_in.shape[1]
        x = self._embed(tgt_in)
        if not c.rel_bias:
            x = x + self.params["embed.pos_dec"][:t]
        for layer in range(c.layers):
            pre = prefixes.get((AttentionClass.Dm, layer))
            rho = pre[0].shape[-2] if pre is not None else 0
            bias = self._rel_bias("dec.rel_bias", t, t, rho, False) if c.rel_bias else None
            h = self._ln(x, f"dec.{layer}.ln1")
            x = x + self._mha(h, h, f"dec.{layer}.self", pre, True, None, bias)
            h = self._ln(x, f"dec.{layer}.ln2")
            x = x + self._mha(h, memory, f"dec.{layer}.cross", prefixes.get((AttentionClass.Dc, layer)),
                              False, memory_mask, None)
            x = x + self._ffn(self._ln(x, f"dec.{layer}.ln3"), f"dec.{layer}.ffn")
        x = self._ln(x, "dec.ln_f")
        return x @ self.params["lm_head.w"] + self.params["lm_head.b"]

    def forward(
        self,
        src: np.ndarray,
        src_mask: np.ndarray,
        tgt_in: np.ndarray,
        prefixes: PrefixKV | None = None,
        extra_embeds: Tensor | None = None,
    ) -> Tensor:
        for ids in (src, tgt_in):
            if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab):
                raise ValueError("token id outside the vocabulary")
        memory, mask = self.encode(src, src_mask, prefixes, extra_embeds)
        return self.decode(tgt_in, memory, mask, prefixes)
