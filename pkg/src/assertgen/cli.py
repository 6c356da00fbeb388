"""Command-line operator surface.

Hyperparameters come from a flat key=value config file (path via --config or
the ASSERTGEN_CONFIG environment variable) overlaid with repeatable
--set KEY=VALUE flags; file and data paths are per-command flags.  Artifacts
carry content hashes, so generation refuses a tokenizer or index that does
not match the checkpoint it is asked to serve.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .corpus import (
    AssertionType,
    Corpus,
    CorpusError,
    SplitSpec,
    build_codebase,
    load_corpus,
    split_corpus,
    type_statistics,
    write_corpus,
)
from .inference import (
    InferenceError,
    beam_search,
    generate,
    provenance_record,
    write_predictions,
    write_provenance,
)
from .metrics import MetricsError, evaluate, format_overlap, format_report, overlap_analysis
from .model import ModelConfig, encode_augmented
from .retriever import (
    RetrieverError,
    index_version_matches,
    jaccard_retrieve,
    load_index,
    random_retrieve,
    retrieve_topk,
    save_index,
    index_codebase,
    embed_query,
)
from .tokenizer import (
    DEFAULT_VOCAB_SIZE,
    TokenizerError,
    load_tokenizer,
    save_tokenizer,
    tokenizer_fingerprint,
    train_bpe,
)
from .trainer import (
    RETRIEVER_MODES,
    TrainConfig,
    TrainerError,
    load_checkpoint,
    train,
)

ENV_CONFIG = "ASSERTGEN_CONFIG"

_INT_KEYS = {
    "batch_size", "max_epochs", "k", "patience", "seed", "max_input_len",
    "max_output_len", "d_model", "encoder_layers", "decoder_layers", "heads",
    "ff_multiplier", "beam", "vocab_size",
}
_FLOAT_KEYS = {"lr", "prob_temperature", "dropout"}
_OPTIONAL_INT_KEYS = {"index_refresh_batches"}
_BOOL_KEYS = {"tie_embedding"}
_STR_KEYS = {"retriever_mode", "prob_mode"}

DEFAULTS = {
    "batch_size": 8,
    "lr": 5e-5,
    "max_epochs": 20,
    "k": 5,
    "patience": 3,
    "retriever_mode": "joint",
    "prob_mode": "softmax",
    "prob_temperature": 1.0,
    "index_refresh_batches": None,
    "seed": 0,
    "max_input_len": 512,
    "max_output_len": 64,
    "beam": 10,
    "vocab_size": DEFAULT_VOCAB_SIZE,
    "d_model": 128,
    "encoder_layers": 2,
    "decoder_layers": 2,
    "heads": 4,
    "ff_multiplier": 4,
    "dropout": 0.1,
    "tie_embedding": False,
}


class CliError(ValueError):
    """Raised for bad invocations; rendered as a structured error line."""


def _coerce(key: str, raw: str):
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _OPTIONAL_INT_KEYS:
        return None if raw.lower() in ("none", "") else int(raw)
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise CliError(f"config key {key!r} expects a boolean, got {raw!r}")
    if key in _STR_KEYS:
        return raw
    raise CliError(f"unknown config key {key!r}")


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the config file, then --set overrides, in that order."""
    config = dict(DEFAULTS)
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
            key, raw = line.split("=", 1)
            config[key.strip()] = _coerce(key.strip(), raw.strip())
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        config[key.strip()] = _coerce(key.strip(), raw.strip())
    return config


def _format_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=config["batch_size"],
        lr=config["lr"],
        max_epochs=config["max_epochs"],
        k=config["k"],
        patience=config["patience"],
        retriever_mode=config["retriever_mode"],
        prob_mode=config["prob_mode"],
        prob_temperature=config["prob_temperature"],
        index_refresh_batches=config["index_refresh_batches"],
        seed=config["seed"],
        max_input_len=config["max_input_len"],
        max_output_len=config["max_output_len"],
    )


def _model_config(config: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=config["d_model"],
        encoder_layers=config["encoder_layers"],
        decoder_layers=config["decoder_layers"],
        heads=config["heads"],
        ff_multiplier=config["ff_multiplier"],
        max_input_len=config["max_input_len"],
        max_output_len=config["max_output_len"],
        dropout=config["dropout"],
        tie_embedding=config["tie_embedding"],
    )


def _load_pair(source: str, target: str, name: str) -> Corpus:
    return load_corpus(source, target, name=name)


def _type_table(corpus: Corpus) -> str:
    stats = type_statistics(corpus)
    lines = [f"{'type':<14} {'count':>8}"]
    for atype in AssertionType:
        lines.append(f"{atype.value:<14} {stats[atype]:>8}")
    lines.append(f"{'Total':<14} {len(corpus):>8}")
    return "\n".join(lines)


def _checkpoint_bundle(args, config):
    """Load checkpoint plus tokenizer and verify they belong together."""
    ckpt = load_checkpoint(args.checkpoint)
    tok = load_tokenizer(args.tokenizer)
    if tokenizer_fingerprint(tok) != ckpt.tokenizer_hash:
        raise CliError(
            "tokenizer content hash does not match the checkpoint; "
            "pass the tokenizer the model was trained with"
        )
    return ckpt, tok


def _cmd_prepare(args, config) -> int:
    corpus = _load_pair(args.source, args.target, args.name)
    print(_type_table(corpus))
    if args.out is not None:
        ratios = tuple(float(r) for r in args.split.split(","))
        if len(ratios) != 3:
            raise CliError(f"--split expects three comma-separated ratios, got {args.split!r}")
        spec = SplitSpec(ratios=ratios, seed=config["seed"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for split in split_corpus(corpus, spec):
            write_corpus(split, out / f"{split.name}.source", out / f"{split.name}.target")
            print(f"wrote {split.name}: {len(split)} pairs")
    return 0


def _cmd_train_tokenizer(args, config) -> int:
    corpus = _load_pair(args.source, args.target, "tokenizer-train")
    tok = train_bpe(corpus, vocab_size=config["vocab_size"])
    save_tokenizer(tok, args.out)
    print(f"vocabulary {tok.vocab_size} tokens ({len(tok.merges)} merges) -> {args.out}")
    print(f"hash {tokenizer_fingerprint(tok)}")
    return 0


def _cmd_train(args, config) -> int:
    tok = load_tokenizer(args.tokenizer)
    train_corpus = _load_pair(args.train_source, args.train_target, "train")
    valid_corpus = _load_pair(args.valid_source, args.valid_target, "valid")
    codebase = build_codebase(train_corpus)
    cfg = _train_config(config)
    model_cfg = _model_config(config, tok.vocab_size)
    checkpoint = train(
        train_corpus, valid_corpus, codebase, tok, cfg, model_cfg, run_dir=args.out
    )
    for record in checkpoint.history.records:
        print(
            f"epoch {record.epoch:>3}  loss {record.loss:.4f}  "
            f"valid-bleu {record.valid_bleu:.4f}  {record.seconds:.1f}s"
        )
    print(f"best epoch {checkpoint.history.best_epoch} -> {args.out}")
    return 0


def _cmd_index(args, config) -> int:
    ckpt, tok = _checkpoint_bundle(args, config)
    encoder = ckpt.retriever_encoder()
    if encoder is None:
        raise CliError(
            f"checkpoint was trained in mode {ckpt.retriever_mode!r} and has no dense retriever"
        )
    codebase = build_codebase(_load_pair(args.source, args.target, "codebase"))
    index = index_codebase(codebase, encoder, tok, max_len=config["max_input_len"])
    save_index(index, args.out)
    print(f"indexed {len(index)} pairs (dim {index.dim}) -> {args.out}")
    return 0


def _cmd_retrieve(args, config) -> int:
    ckpt, tok = _checkpoint_bundle(args, config)
    codebase = build_codebase(_load_pair(args.source, args.target, "codebase"))
    k = config["k"]
    mode = ckpt.retriever_mode
    if mode in ("jaccard", "random"):
        if mode == "jaccard":
            results = jaccard_retrieve(codebase, args.query, k)
        else:
            results = random_retrieve(codebase, k, config["seed"])
    else:
        encoder = ckpt.retriever_encoder()
        if encoder is None:
            raise CliError("checkpoint has no dense retriever; nothing to query")
        if args.index is None:
            raise CliError("dense retrieval needs --index (build one with the index command)")
        index = load_index(args.index, codebase)
        if not index_version_matches(index, encoder):
            raise CliError("index was built with different retriever parameters; rebuild it")
        vec = embed_query(encoder, tok, args.query, max_len=config["max_input_len"])
        results = retrieve_topk(
            index, vec, k, prob_mode=config["prob_mode"], temperature=config["prob_temperature"]
        )
    for rank, r in enumerate(results, start=1):
        print(f"{rank:>2}. id={r.pair.id:<6} score={r.score:+.6f} p={r.probability:.4f}")
        print(f"    {r.pair.focal_test}")
        print(f"    {r.pair.assertion}")
    return 0


def _cmd_generate(args, config) -> int:
    ckpt, tok = _checkpoint_bundle(args, config)
    model = ckpt.model()
    mode = ckpt.retriever_mode
    inputs = [
        line.strip()
        for line in Path(args.input).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    beam = config["beam"]
    texts = []
    records = []
    if mode in ("joint", "frozen-pretrained", "frozen-finetuned"):
        if args.index is None or args.source is None or args.target is None:
            raise CliError(f"mode {mode!r} needs --index plus the codebase --source/--target")
        encoder = ckpt.retriever_encoder()
        codebase = build_codebase(_load_pair(args.source, args.target, "codebase"))
        index = load_index(args.index, codebase)
        if not index_version_matches(index, encoder):
            raise CliError("index was built with different retriever parameters; rebuild it")
        for qid, ft in enumerate(inputs):
            result = generate(
                model, index, tok, ft,
                k=config["k"], beam=beam, encoder=encoder,
                prob_mode=config["prob_mode"], temperature=config["prob_temperature"],
            )
            texts.append(result.assertion)
            records.append(provenance_record(qid, result))
    else:
        codebase = None
        if mode in ("jaccard", "random"):
            if args.source is None or args.target is None:
                raise CliError(f"mode {mode!r} needs the codebase --source/--target")
            codebase = build_codebase(_load_pair(args.source, args.target, "codebase"))
        for qid, ft in enumerate(inputs):
            if mode == "jaccard":
                top = jaccard_retrieve(codebase, ft, 1)[0]
            elif mode == "random":
                top = random_retrieve(codebase, 1, config["seed"] * 9_176 + qid)[0]
            else:
                top = None
            input_ids = encode_augmented(
                tok, ft, top.pair if top is not None else None, config["max_input_len"]
            )
            candidates = beam_search(model, input_ids, beam)
            best = next((h for h in candidates if h.finished), candidates[0])
            texts.append(tok.decode(list(best.ids)))
            record = {"query_id": qid, "assertion": texts[-1]}
            if top is not None:
                record.update(retrieved_id=top.pair.id, score=top.score, probability=top.probability)
            records.append(record)
    write_predictions(args.out, texts)
    print(f"wrote {len(texts)} predictions -> {args.out}")
    if args.provenance is not None:
        write_provenance(args.provenance, records)
        print(f"wrote provenance -> {args.provenance}")
    return 0


def _cmd_evaluate(args, config) -> int:
    golds = _load_pair(args.source, args.target, "gold")
    preds = [
        line.rstrip("\n")
        for line in Path(args.preds).read_text(encoding="utf-8").splitlines()
    ]
    report = evaluate(preds, golds)
    table = format_report(report)
    print(table)
    if args.report is not None:
        Path(args.report).write_text(table + "\n", encoding="utf-8")
    if args.records is not None:
        import json

        with open(args.records, "w", encoding="utf-8") as fh:
            for r in report.records:
                fh.write(
                    json.dumps(
                        {
                            "id": r.id,
                            "type": r.gold_type.value,
                            "correct": r.correct,
                            "bleu": r.bleu,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    return 0


def _cmd_ablate(args, config) -> int:
    tok = load_tokenizer(args.tokenizer)
    train_corpus = _load_pair(args.train_source, args.train_target, "train")
    valid_corpus = _load_pair(args.valid_source, args.valid_target, "valid")
    test_corpus = _load_pair(args.test_source, args.test_target, "test")
    codebase = build_codebase(train_corpus)
    modes = args.modes.split(",") if args.modes else list(RETRIEVER_MODES)
    for mode in modes:
        if mode not in RETRIEVER_MODES:
            raise CliError(f"unknown retriever mode {mode!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        config_mode = dict(config, retriever_mode=mode)
        cfg = _train_config(config_mode)
        model_cfg = _model_config(config_mode, tok.vocab_size)
        ckpt = train(
            train_corpus, valid_corpus, codebase, tok, cfg, model_cfg, run_dir=out / mode
        )
        texts = _predict_for_mode(ckpt, tok, codebase, test_corpus, config_mode)
        write_predictions(str(out / mode / "test-predictions.txt"), texts)
        report = evaluate(texts, test_corpus)
        rows.append((mode, report.accuracy, report.bleu, report.codebleu))
        print(f"{mode}: accuracy {report.accuracy:.4f}  bleu {report.bleu:.4f}")
    lines = [f"{'mode':<18} {'accuracy':>9} {'bleu':>9} {'codebleu':>9}"]
    for mode, acc, bleu_score, codebleu_score in rows:
        lines.append(f"{mode:<18} {acc:>9.4f} {bleu_score:>9.4f} {codebleu_score:>9.4f}")
    table = "\n".join(lines)
    print(table)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return 0


def _predict_for_mode(ckpt, tok, codebase, test_corpus, config) -> list[str]:
    """Beam-decode a test corpus under a checkpoint's own retriever mode."""
    model = ckpt.model()
    mode = ckpt.retriever_mode
    beam = config["beam"]
    encoder = ckpt.retriever_encoder()
    index = None
    if encoder is not None:
        index = index_codebase(codebase, encoder, tok, max_len=config["max_input_len"])
    texts = []
    for pair in test_corpus:
        if index is not None:
            result = generate(
                model, index, tok, pair.focal_test,
                k=config["k"], beam=beam, encoder=encoder,
                prob_mode=config["prob_mode"], temperature=config["prob_temperature"],
            )
            texts.append(result.assertion)
            continue
        if mode == "jaccard":
            top = jaccard_retrieve(codebase, pair.focal_test, 1)[0].pair
        elif mode == "random":
            top = random_retrieve(codebase, 1, config["seed"] * 9_176 + pair.id)[0].pair
        else:
            top = None
        input_ids = encode_augmented(tok, pair.focal_test, top, config["max_input_len"])
        candidates = beam_search(model, input_ids, beam)
        best = next((h for h in candidates if h.finished), candidates[0])
        texts.append(tok.decode(list(best.ids)))
    return texts


def _cmd_overlap(args, config) -> int:
    golds = _load_pair(args.source, args.target, "gold")
    systems = {}
    for item in args.preds:
        if "=" not in item:
            raise CliError(f"--preds expects NAME=FILE, got {item!r}")
        name, path = item.split("=", 1)
        systems[name] = [
            line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()
        ]
    report = overlap_analysis(systems, golds)
    table = format_overlap(report)
    print(table)
    if args.out is not None:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    # The config options are accepted both before and after the subcommand;
    # the trailing position takes precedence and the --set lists concatenate.
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument(
        "--config", dest="config_tail", default=None,
        help="key=value config file (or set ASSERTGEN_CONFIG)",
    )
    shared.add_argument(
        "--set", action="append", dest="set_tail", default=[], metavar="KEY=VALUE",
        help="override one config value; repeatable",
    )
    shared.add_argument(
        "--show-config", action="store_true", dest="show_config_tail",
        help="print the effective config and exit",
    )
    parser = argparse.ArgumentParser(
        prog="assertgen",
        description="Retrieval-augmented generation of unit-test assertions.",
    )
    parser.add_argument("--config", help="key=value config file (or set ASSERTGEN_CONFIG)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config value; repeatable",
    )
    parser.add_argument(
        "--show-config", action="store_true", help="print the effective config and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser(
        "prepare", parents=[shared],
        help="validate a corpus, print type statistics, optionally split",
    )
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--name", default="corpus")
    p.add_argument("--out", help="directory for train/valid/test splits")
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train-tokenizer", parents=[shared], help="learn a BPE vocabulary from a corpus")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_tokenizer)

    p = sub.add_parser("train", parents=[shared], help="train a generator (joint or ablation mode)")
    p.add_argument("--train-source", required=True)
    p.add_argument("--train-target", required=True)
    p.add_argument("--valid-source", required=True)
    p.add_argument("--valid-target", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True, help="training-run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("index", parents=[shared], help="embed a codebase with a checkpoint's retriever")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("retrieve", parents=[shared], help="query the top-k neighbours for one focal test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--index")
    p.add_argument("--query", required=True)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("generate", parents=[shared], help="batch-generate assertions for a file of focal tests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--input", required=True, help="one focal test per line")
    p.add_argument("--out", required=True)
    p.add_argument("--index")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--provenance")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", parents=[shared], help="score predictions against a gold corpus")
    p.add_argument("--preds", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--report")
    p.add_argument("--records", help="line-delimited per-sample records")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", parents=[shared], help="train and score every retriever mode")
    p.add_argument("--train-source", required=True)
    p.add_argument("--train-target", required=True)
    p.add_argument("--valid-source", required=True)
    p.add_argument("--valid-target", required=True)
    p.add_argument("--test-source", required=True)
    p.add_argument("--test-target", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", help="comma-separated subset of modes")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("overlap", parents=[shared], help="unique-correct and pairwise agreement across systems")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--preds", action="append", required=True, metavar="NAME=FILE")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_overlap)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    config_path = getattr(args, "config_tail", None) or args.config
    overrides = args.set + getattr(args, "set_tail", [])
    show = args.show_config or getattr(args, "show_config_tail", False)
    try:
        config = load_config(config_path, overrides)
        if show:
            print(_format_config(config))
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        return args.func(args, config)
    except (
        CliError,
        CorpusError,
        TokenizerError,
        TrainerError,
        RetrieverError,
        InferenceError,
        MetricsError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
