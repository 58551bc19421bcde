"""Optimisation of the trainable set with the base model frozen.

The loss is the mean token-level negative log-likelihood of the targets under
teacher forcing.  With gradient accumulation the NLL of every micro-batch is
divided by the token count of the whole accumulated batch, so ``batch=2,
accum=2`` gives exactly the update of ``batch=4, accum=1``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .decoding import DecodeConfig, generate
from .guidance import GuidanceResolver
from .metrics import bleu, sequence_accuracy
from .model import ControlPrefixModel
from .tasks import ToyExample
from .tensor import Parameter, Tensor
from .transformer import Seq2SeqTransformer
from .utils import derive_rng
from .vocab import Vocab, pad_batch

log = logging.getLogger(__name__)

METRICS = ("accuracy", "bleu", "loss")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 100
    batch: int = 16
    accum: int = 1
    seed: int = 0
    checkpoint_metric: str = "accuracy"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0
    oov_rate: float = 0.02

    def __post_init__(self):
        if self.batch < 1 or self.accum < 1:
            raise ValueError("batch and accum must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.checkpoint_metric not in METRICS:
            raise ValueError(f"checkpoint_metric must be one of {METRICS}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr``, then linear decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.total_steps - step) / span)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------- batches

@dataclass
class Encoded:
    src: list[int]
    tgt: list[int]
    attrs: dict
    output: str = ""


def encode_examples(examples: Sequence[ToyExample], vocab: Vocab) -> list[Encoded]:
    return [Encoded(vocab.encode(ex.input), vocab.encode(ex.output), dict(ex.attrs), ex.output) for ex in examples]


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    weights: np.ndarray
    label_ids: list[tuple[int, ...]]

    @property
    def n_tokens(self) -> int:
        return int(self.weights.sum())


def make_batch(items: Sequence[Encoded], vocab: Vocab, label_ids: Sequence[Sequence[int]]) -> Batch:
    if not items:
        raise ValueError("empty batch")
    src, src_mask = pad_batch([e.src for e in items], vocab.pad_id)
    tgt_out, w = pad_batch([e.tgt for e in items], vocab.pad_id)
    tgt_in = np.full_like(tgt_out, vocab.pad_id)
    tgt_in[:, 0] = vocab.bos_id
    tgt_in[:, 1:] = tgt_out[:, :-1]
    return Batch(src, src_mask, tgt_in, tgt_out, w.astype(np.float64), [tuple(x) for x in label_ids])


def batch_nll(model: ControlPrefixModel, batch: Batch) -> Tensor:
    """Summed target NLL of a batch (padding excluded)."""
    logits = model.logits(batch.src, batch.src_mask, batch.tgt_in, batch.label_ids)
    return T.nll_sum(logits, batch.tgt_out, batch.weights)


def loss(model: ControlPrefixModel, items: Sequence[Encoded], resolver: GuidanceResolver | None = None) -> Tensor:
    """Mean token-level NLL of ``items`` with guidance resolved in inference mode."""
    if not items:
        raise ValueError("empty batch")
    resolver = resolver or GuidanceResolver(model.schema, use_oov=False)
    batch = make_batch(items, model.vocab, [resolver.resolve(e.attrs) for e in items])
    return T.scale(batch_nll(model, batch), 1.0 / batch.n_tokens)


# ---------------------------------------------------------------- evaluation

def decode_items(model: ControlPrefixModel, items: Sequence[Encoded], resolver: GuidanceResolver,
                 cfg: DecodeConfig, chunk: int = 256) -> list[str]:
    outs: list[str] = []
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        ids = generate(model, [e.src for e in part], [resolver.resolve(e.attrs) for e in part], cfg)
        outs += [model.vocab.decode(x) for x in ids]
    return outs


def make_evaluator(items: Sequence[Encoded], metric: str, decode: DecodeConfig | None = None,
                   resolver_factory: Callable[[ControlPrefixModel], GuidanceResolver] | None = None):
    """Validation score (higher is better) of a model on ``items``."""
    decode = decode or DecodeConfig(max_len=max((len(e.tgt) for e in items), default=8) + 4)

    def evaluate(model: ControlPrefixModel) -> float:
        resolver = resolver_factory(model) if resolver_factory else GuidanceResolver(model.schema)
        if metric == "loss":
            with T.no_grad():
                return -loss(model, items, resolver).item()
        hyps = decode_items(model, items, resolver, decode)
        refs = [e.output for e in items]
        return sequence_accuracy(hyps, refs) if metric == "accuracy" else bleu(hyps, refs)

    return evaluate


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    best_metric: float | None
    best_step: int
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _snapshot(params: Sequence[Parameter]) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def _restore(params: Sequence[Parameter], state: dict[str, np.ndarray]) -> None:
    for p in params:
        p.data[...] = state[p.name]


def _optimize(
    params: Sequence[Parameter],
    micro_loss: Callable[[list, np.random.Generator], tuple[Tensor, int]],
    n_tokens: Callable[[list], int],
    data: Sequence,
    cfg: TrainConfig,
    evaluate: Callable[[], float] | None,
    log_fn: Callable[[dict], None] | None,
    tag: str,
) -> TrainResult:
    start = time.perf_counter()
    params = [p for p in params if not p.frozen]
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    order_rng = derive_rng(cfg.seed, f"{tag}.order")
    oov_rng = derive_rng(cfg.seed, f"{tag}.oov")
    per_step = cfg.batch * cfg.accum
    order: list[int] = []
    history: list[dict] = []
    best_state = _snapshot(params)
    best_metric: float | None = None
    best_step = 0

    def consider(step: int, record: dict) -> None:
        nonlocal best_metric, best_step, best_state
        if evaluate is None:
            return
        val = evaluate()
        record["val_metric"] = val
        if best_metric is None or val > best_metric:
            best_metric, best_step, best_state = val, step, _snapshot(params)

    for step in range(cfg.total_steps):
        while len(order) < per_step:
            order.extend(order_rng.permutation(len(data)).tolist())
        chunk, order = [data[i] for i in order[:per_step]], order[per_step:]
        total = n_tokens(chunk)
        opt.zero_grad()
        step_loss = 0.0
        for i in range(0, per_step, cfg.batch):
            nll, _ = micro_loss(chunk[i:i + cfg.batch], oov_rng)
            scaled = T.scale(nll, 1.0 / total)
            step_loss += scaled.item()
            scaled.backward()
        if not math.isfinite(step_loss):
            raise TrainingDiverged(step, step_loss)
        rate = lr_at(step, cfg)
        opt.step(rate)
        record = {"step": step + 1, "loss": step_loss, "lr": rate}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.total_steps:
            consider(step + 1, record)
        if step + 1 == cfg.total_steps:
            consider(step + 1, record)
        history.append(record)
        if log_fn is not None:
            log_fn(record)
    if cfg.total_steps == 0 and evaluate is not None:
        best_metric = evaluate()
    if evaluate is not None:
        _restore(params, best_state)
    opt.zero_grad()
    return TrainResult(best_metric, best_step, history, time.perf_counter() - start)


def train(
    model: ControlPrefixModel,
    data: Sequence[Encoded],
    cfg: TrainConfig,
    evaluate: Callable[[ControlPrefixModel], float] | None = None,
    log_fn: Callable[[dict], None] | None = None,
    tag: str = "train",
) -> TrainResult:
    """Optimise the model's trainable set; the base stays frozen.

    When ``evaluate`` is given, the trainable state with the highest
    validation score is restored at the end.
    """
    frozen_before = model.frozen_checksum()
    resolver = GuidanceResolver(model.schema, oov_rate=cfg.oov_rate)

    def micro(items, rng):
        ids = [resolver.resolve(e.attrs, "train", rng) for e in items]
        batch = make_batch(items, model.vocab, ids)
        return batch_nll(model, batch), batch.n_tokens

    result = _optimize(
        model.trainable_parameters(), micro, lambda items: sum(len(e.tgt) for e in items), data, cfg,
        (lambda: evaluate(model)) if evaluate else None, log_fn, tag,
    )
    if model.frozen_checksum() != frozen_before:
        raise AssertionError("frozen base parameters changed during training")
    return result


def train_stages(
    model: ControlPrefixModel,
    stages: Sequence[tuple[Sequence[Encoded], TrainConfig]],
    evaluate: Callable[[ControlPrefixModel], float] | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> list[TrainResult]:
    """Sequential stages (e.g. mixed data, then target-only); the last stage picks the checkpoint."""
    results = []
    for i, (data, cfg) in enumerate(stages):
        last = i == len(stages) - 1
        results.append(train(model, data, cfg, evaluate if last else None, log_fn, tag=f"stage{i + 1}"))
    return results


def pretrain_base(
    base: Seq2SeqTransformer,
    vocab: Vocab,
    data: Sequence[Encoded],
    cfg: TrainConfig,
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full-parameter training of the base model on guidance-free pairs.

    This produces the frozen model that prefixes are later tuned against.
    """
    params = base.base_parameters()
    for p in params:
        p.unfreeze()

    def micro(items, rng):
        batch = make_batch(items, vocab, [()] * len(items))
        logits = base.forward(batch.src, batch.src_mask, batch.tgt_in)
        return T.nll_sum(logits, batch.tgt_out, batch.weights), batch.n_tokens

    try:
        return _optimize(params, micro, lambda items: sum(len(e.tgt) for e in items), data, cfg, None, log_fn,
                         "pretrain")
    finally:
        base.freeze()
