"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import checkpoint
from .config import ConfigError, RunConfig
from .config import load as load_config
from .decoding import DecodeConfig, generate
from .guidance import (AttributeSchema, EmbeddingFixture, GuidanceError, GuidanceResolver, default_fixture_path,
                       zero_shot_map)
from .metrics import bleu, length_compliance, sequence_accuracy
from .model import ControlPrefixModel
from .prefix import export_rows, param_count, write_export, write_svg
from .tasks import LENGTH_CUES, ToyExample, read_jsonl, split, with_length_cues
from .training import (Encoded, TrainConfig, TrainingDiverged, decode_items, encode_examples, make_evaluator,
                       pretrain_base, train)
from .transformer import Seq2SeqTransformer
from .utils import derive_rng
from .vocab import Vocab

log = logging.getLogger("ctrlprefix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ pipeline

@dataclass
class Prepared:
    vocab: Vocab
    base: Seq2SeqTransformer
    schema: object
    train: list[Encoded]
    val: list[Encoded]


def read_examples(path: str | Path) -> list[ToyExample]:
    try:
        examples = read_jsonl(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


def prepare(cfg: RunConfig, examples: Sequence[ToyExample]) -> Prepared:
    """Split the data, build vocabulary and schema, and produce the frozen base model."""
    val_n = int(round(cfg.data.val_fraction * len(examples)))
    if val_n:
        train_ex, val_ex = split(examples, [1 - cfg.data.val_fraction, cfg.data.val_fraction], cfg.seed)
    else:
        train_ex, val_ex = list(examples), []
    if cfg.data.base_checkpoint:
        prior, _ = checkpoint.load(cfg.data.base_checkpoint)
        base, vocab = prior.base, prior.vocab
        base.set_trainable_tokens(())
    else:
        texts = [t for ex in examples for t in (ex.input, ex.output)] + [" ".join(cfg.data.special_tokens)]
        if cfg.pretrain.length_cues:
            texts.append(" ".join(LENGTH_CUES))
        vocab = Vocab.build(texts)
        base = Seq2SeqTransformer(dataclasses.replace(cfg.model, vocab=len(vocab)), derive_rng(cfg.seed, "base"))
    schema = cfg.schema_for(train_ex)
    resolver = GuidanceResolver(schema, use_oov=False)
    for i, ex in enumerate(train_ex + val_ex):
        try:
            resolver.resolve(ex.attrs, "train")
        except GuidanceError as exc:
            raise DataError(f"example {i}: {exc}") from None
    train_enc, val_enc = encode_examples(train_ex, vocab), encode_examples(val_ex, vocab)
    if cfg.pretrain.total_steps and not cfg.data.base_checkpoint:
        p = cfg.pretrain
        corpus = train_enc
        if p.length_cues:
            ratio_attrs = [s.name for s in cfg.schema if s.ratio]
            if not ratio_attrs:
                raise ConfigError("pretrain.length_cues needs a ratio attribute in [schema]")
            try:
                cued = with_length_cues(train_ex, p.length_cues, cfg.seed, ratio_attrs[0])
            except KeyError as exc:
                raise DataError(f"length_cues: example without attribute {exc}") from None
            corpus = encode_examples(cued, vocab)
        pretrain_base(base, vocab, corpus,
                      TrainConfig(lr=p.lr, warmup_steps=p.warmup_steps, total_steps=p.total_steps, batch=p.batch,
                                  seed=cfg.seed))
    base.freeze()
    return Prepared(vocab, base, schema, train_enc, val_enc)


def build_model(cfg: RunConfig, prep: Prepared) -> ControlPrefixModel:
    variant = cfg.data.variant
    schema = AttributeSchema() if variant == "guidance_free" else prep.schema
    rng = derive_rng(cfg.seed, f"model.{variant}")
    return ControlPrefixModel.create(prep.base, prep.vocab, schema, cfg.prefix, rng,
                                     trainable_tokens=cfg.data.special_tokens,
                                     control_tokens=variant == "control_tokens")


def fit(cfg: RunConfig, prep: Prepared, log_fn=None):
    model = build_model(cfg, prep)
    evaluate = None
    if prep.val:
        max_len = max(len(e.tgt) for e in prep.val) + 4
        decode = dataclasses.replace(cfg.decode, max_len=max(cfg.decode.max_len, max_len))
        evaluate = make_evaluator(prep.val, cfg.train.checkpoint_metric, decode)
    result = train(model, prep.train, cfg.train, evaluate, log_fn)
    return model, result


def parameter_report(model: ControlPrefixModel) -> dict:
    """Closed-form prefix counts plus the share of added parameters relative to the frozen model."""
    counts = param_count(model.bank.schema, model.config, model.prefix_config)
    frozen = sum(p.data.size for p in model.frozen_parameters())
    extra = sum(p.data.size for p in model.trainable_parameters() if not p.name.startswith(("prefix.", "reparam.")))
    folded = counts["inference_expanded"] + extra
    return {**counts, "other_trainable": extra, "frozen": frozen, "trainable_folded": folded,
            "pct_additional": 100.0 * folded / frozen}


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    examples = read_examples(args.data)
    prep = prepare(cfg, examples)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".metrics.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def log_fn(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        model, result = fit(cfg, prep, log_fn)
    report = parameter_report(model)
    extra = {"variant": cfg.data.variant, "decode": cfg.decode.to_dict(), "best_metric": result.best_metric,
             "best_step": result.best_step, "params": report}
    checkpoint.save(model, args.out, cfg.seed, result.history, extra)
    print(json.dumps({"checkpoint": str(args.out), "best_metric": result.best_metric,
                      "best_step": result.best_step, "params": report}, indent=2))
    return EXIT_OK


def _decode_config(args, header: dict) -> DecodeConfig:
    base = DecodeConfig(**header.get("extra", {}).get("decode", {}))
    changes = {k: v for k, v in (("beam", args.beam), ("ln_alpha", args.ln_alpha), ("min_len", args.min_len),
                                 ("max_len", args.max_len)) if v is not None}
    if args.no_repeat_trigram:
        changes["no_repeat_trigram"] = True
    return dataclasses.replace(base, **changes)


def load_fixture(spec: str, labels: Sequence[str]) -> EmbeddingFixture:
    """Label vectors from a TSV of label or word vectors (labels missing from it are built from their words)."""
    path = default_fixture_path() if spec in (None, "", "default") else Path(spec)
    words = EmbeddingFixture.load(path)
    vectors = {}
    for label in labels:
        if label in words:
            vectors[label] = words[label]
        else:
            vectors[label] = EmbeddingFixture.from_words([label], words)[label]
    return EmbeddingFixture(vectors)


def _resolver(model: ControlPrefixModel, args, examples: Sequence[ToyExample]) -> GuidanceResolver:
    fixture = None
    if args.zero_shot is not None:
        labels = set()
        for attr in model.schema:
            if attr.ratio:
                continue
            labels.update(attr.labels)
            labels.update(str(ex.attrs[attr.name]) for ex in examples if attr.name in ex.attrs)
        try:
            fixture = load_fixture(args.zero_shot, sorted(labels))
        except (OSError, GuidanceError) as exc:
            raise DataError(f"zero-shot fixture: {exc}") from None
    return GuidanceResolver(model.schema, fixture=fixture, use_oov=args.oov)


def cmd_generate(args) -> int:
    model, header = checkpoint.load(args.checkpoint)
    model = model.fold()
    examples = read_examples(args.input)
    cfg = _decode_config(args, header)
    resolver = _resolver(model, args, examples)
    records, todo = [], []
    for ex in examples:
        record = {"input": ex.input, "attrs": ex.attrs}
        try:
            ids = resolver.resolve(ex.attrs)
        except GuidanceError as exc:
            record["error"] = str(exc)
        else:
            record["guidance"] = {a.name: a.all_labels[i] for a, i in zip(model.schema, ids)}
            mapped = {a: m for (a, lab), m in resolver.mappings.items() if str(ex.attrs.get(a)) == lab}
            if mapped:
                record["zero_shot"] = mapped
            todo.append((record, model.vocab.encode(ex.input), ids))
        records.append(record)
    for i in range(0, len(todo), 256):
        chunk = todo[i:i + 256]
        outs = generate(model, [src for _, src, _ in chunk], [ids for _, _, ids in chunk], cfg)
        for (record, _, _), toks in zip(chunk, outs):
            record["output"] = model.vocab.decode(toks)
    errors = sum("error" in r for r in records)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for record in records:
            out.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    for (attr, label), seen in sorted(resolver.mappings.items()):
        log.info("zero-shot: %s=%s -> %s", attr, label, seen)
    print(f"{len(examples)} records, {errors} errors", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, header = checkpoint.load(args.checkpoint)
    model = model.fold()
    examples = read_examples(args.data)
    cfg = _decode_config(args, header)
    resolver = _resolver(model, args, examples)
    try:
        hyps = decode_items(model, encode_examples(examples, model.vocab), resolver, cfg)
    except GuidanceError as exc:
        raise DataError(str(exc)) from None
    refs = [ex.output for ex in examples]
    result = {"n": len(examples), "accuracy": sequence_accuracy(hyps, refs), "bleu": bleu(hyps, refs)}
    for attr in model.schema:
        if attr.ratio:
            lc = length_compliance(hyps, [ex.input for ex in examples], [float(ex.attrs[attr.name]) for ex in examples])
            result[f"{attr.name}_compliance"] = lc["compliance"]
            result[f"{attr.name}_per_target"] = {str(k): v for k, v in lc["per_target"].items()}
    if resolver.mappings:
        result["zero_shot"] = {f"{a}={lab}": m for (a, lab), m in sorted(resolver.mappings.items())}
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fold(args) -> int:
    model, header = checkpoint.load(args.checkpoint)
    checkpoint.save(model.fold(), args.out, header["seed"], header["metrics"], header["extra"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    try:
        rhos = [int(r) for r in args.rho.split(",")]
    except ValueError:
        raise ConfigError(f"--rho: expected comma-separated integers, got {args.rho!r}") from None
    prep = prepare(cfg, read_examples(args.data))
    if not prep.val:
        raise ConfigError("sweep needs a validation split (data.val_fraction > 0)")
    rows = []
    for rho in rhos:
        run = cfg.replace(prefix=dataclasses.replace(cfg.prefix, rho=rho))
        model, result = fit(run, prep)
        rows.append((rho, parameter_report(model)["pct_additional"], result.best_metric))
    best = max(r[2] for r in rows)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "params_pct", "val_metric", "pct_of_max"])
        for rho, pct, metric in rows:
            w.writerow([rho, f"{pct:.6f}", f"{metric:.6f}", f"{100.0 * metric / best if best else 0.0:.4f}"])
    print(Path(args.out).read_text(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    if model.control_tokens is not None:
        raise ConfigError("checkpoint has no control prefixes")
    try:
        labels, rows, proj = export_rows(model.fold().bank, args.attribute, args.cls, include_oov=args.include_oov)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    stem = f"{args.attribute}_{args.cls}"
    paths = list(write_export(labels, rows, proj, args.out, stem))
    if args.svg:
        paths.append(write_svg(labels, proj, Path(args.out) / f"{stem}_pca.svg"))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_zero_shot_map(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    try:
        attr = model.schema[args.attribute]
    except KeyError:
        raise ConfigError(f"unknown attribute {args.attribute!r}") from None
    try:
        fixture = load_fixture(args.fixture, list(attr.labels) + list(args.labels))
    except (OSError, GuidanceError) as exc:
        raise DataError(f"fixture: {exc}") from None
    for label in args.labels:
        print(f"{label}\t{zero_shot_map(label, attr.labels, fixture)}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int)
    p.add_argument("--ln-alpha", type=float)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--no-repeat-trigram", action="store_true")
    p.add_argument("--zero-shot", nargs="?", const="default", metavar="FIXTURE",
                   help="map unseen labels to the most similar seen label (optional fixture TSV)")
    p.add_argument("--oov", action="store_true", help="route unseen labels to the OOV prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrlprefix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train prefixes on a JSONL dataset")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("out")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="metrics JSONL path (default: OUT.metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode a JSONL file")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out")
    _decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="accuracy, BLEU and length compliance on a JSONL file")
    p.add_argument("checkpoint")
    p.add_argument("data")
    _decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fold", help="expand prefixes and drop the expanders")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("sweep", help="train one model per prefix length")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("--rho", default="1,2,4")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="export control prefixes and their 2-D projection")
    p.add_argument("checkpoint")
    p.add_argument("attribute")
    p.add_argument("cls", choices=["E", "Dc", "Dm"])
    p.add_argument("out")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--include-oov", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("zero-shot-map", help="show the seen label each unseen label maps to")
    p.add_argument("checkpoint")
    p.add_argument("attribute")
    p.add_argument("labels", nargs="+")
    p.add_argument("--fixture", default="default")
    p.set_defaults(func=cmd_zero_shot_map)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
