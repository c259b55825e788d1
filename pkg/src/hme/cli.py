"""Command-line surface: train, eval, predict, ensemble, export-attention.

Configuration is a JSON file (version 1).  Relative paths inside it resolve
against the config file's directory; the validated config with resolved paths
is echoed into every checkpoint so the other commands can rebuild the model.

Exit codes: 0 success, 2 input/config error, 3 numerical failure.  Errors go
to stderr as one line with an ``hme: error[kind]:`` prefix.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import embeddings as emb
from . import metaembed as me
from . import model as mdl
from . import training as tr
from .autodiff import NumericsError
from .tokenization import (ConllFormatError, TokenizedSentence, load_bpe_merges,
                           read_conll, read_tokens, to_chars, write_conll)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration or incompatible inputs."""


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    data: dict[str, str]
    manifest: emb.EmbeddingManifest
    model: mdl.ModelConfig
    train: tr.TrainConfig
    echo: dict      # resolved copy stored in checkpoints


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def load_run_config(path: str, seed_override: int | None = None) -> RunConfig:
    """Parse, resolve and validate a JSON run config."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    _require(isinstance(raw, dict), f"{path}: config must be a JSON object")
    _require(raw.get("version") == CONFIG_VERSION,
             f"{path}: unsupported config version {raw.get('version')!r}")
    base = os.path.dirname(os.path.abspath(path))

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    _require(isinstance(seed, int), "seed must be an integer")

    data_raw = raw.get("data", {})
    _require(isinstance(data_raw, dict) and data_raw, "config needs a data section")
    data = {k: _resolve(base, v) for k, v in data_raw.items()}
    for name, p in data.items():
        _require(os.path.exists(p), f"data file for {name!r} does not exist: {p}")

    try:
        model_cfg = mdl.ModelConfig(**raw.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model section: {exc}") from None
    train_raw = dict(raw.get("train", {}))
    train_raw["seed"] = seed
    train_raw.setdefault("dropout", model_cfg.dropout)
    try:
        train_cfg = tr.TrainConfig(**train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from None

    entries = []
    for i, e in enumerate(raw.get("embeddings", [])):
        _require(isinstance(e, dict), f"embeddings[{i}] must be an object")
        try:
            entry = emb.ManifestEntry(
                level=e.get("level", ""), language_id=e.get("language", ""),
                path=_resolve(base, e.get("path", "")), format=e.get("format", ""),
                dim=e.get("dim"), limit=e.get("limit"),
                merges=_resolve(base, e["merges"]) if e.get("merges") else None)
        except ValueError as exc:
            raise ConfigError(f"embeddings[{i}]: {exc}") from None
        _require(os.path.exists(entry.path),
                 f"embedding file does not exist: {entry.path}")
        if entry.merges:
            _require(os.path.exists(entry.merges),
                     f"merges file does not exist: {entry.merges}")
        entries.append(entry)
    manifest = emb.EmbeddingManifest(entries)

    n_word = len(manifest.by_level("word"))
    n_sub = len(manifest.by_level("subword"))
    variant = model_cfg.variant
    if variant == "hme":
        _require(n_word >= 1 and n_sub >= 1,
                 "hme variant needs word and subword embedding entries")
    elif variant == "random":
        _require(n_word == 0 and n_sub == 0,
                 "random variant forbids embedding entries (its table is generated)")
    else:
        _require(n_word >= 1, f"{variant} variant needs word embedding entries")
        _require(n_sub == 0, f"{variant} variant forbids subword embedding entries")

    output_dir = _resolve(base, raw.get("output_dir", "run"))
    echo = {
        "version": CONFIG_VERSION,
        "seed": seed,
        "output_dir": output_dir,
        "data": data,
        "model": model_cfg.to_dict(),
        "train": {k: v for k, v in train_raw.items()},
        "embeddings": [
            {"level": e.level, "language": e.language_id, "path": e.path,
             "format": e.format, "dim": e.dim, "limit": e.limit, "merges": e.merges}
            for e in entries
        ],
    }
    return RunConfig(seed=seed, output_dir=output_dir, data=data, manifest=manifest,
                     model=model_cfg, train=train_cfg, echo=echo)


def _label_vocabulary(sentences: list[TokenizedSentence]) -> list[str]:
    tags = {t for s in sentences for t in s.labels}
    return ["O"] + sorted(tags - {"O"})


def _build_resources(cfg: RunConfig, train_sentences) -> mdl.Resources:
    labels = _label_vocabulary(train_sentences)
    word_tables = cfg.manifest.load_tables("word")
    subword_tables = []
    bpe_models = {}
    char_table = None
    if cfg.model.variant == "hme":
        subword_tables = cfg.manifest.load_tables("subword")
        for entry in cfg.manifest.by_level("subword"):
            bpe_models[entry.language_id] = load_bpe_merges(
                entry.merges, entry.language_id)
        alphabet = {c for s in train_sentences for w in s.words for c in to_chars(w)}
        char_table = emb.init_char_table(alphabet, cfg.model.char_dim,
                                         seed=cfg.seed)
    if cfg.model.variant == "random":
        vocab = {w for s in train_sentences for w in s.words}
        word_tables = [me.random_baseline(vocab, cfg.model.random_dim,
                                          seed=cfg.seed)]
    return mdl.Resources(labels=labels, word_tables=word_tables,
                         subword_tables=subword_tables, bpe_models=bpe_models,
                         char_table=char_table)


def _restore_model(checkpoint_path: str) -> tuple[mdl.SequenceTagger, dict]:
    header, arrays = mdl.load_checkpoint(checkpoint_path)
    echo = header["run_config"]
    model_cfg = mdl.ModelConfig(**header["model_config"])
    entries = []
    for e in echo.get("embeddings", []):
        entry = emb.ManifestEntry(level=e["level"], language_id=e["language"],
                                  path=e["path"], format=e["format"], dim=e.get("dim"),
                                  limit=e.get("limit"), merges=e.get("merges"))
        if not os.path.exists(entry.path):
            raise ConfigError(f"embedding file from checkpoint is missing: {entry.path}")
        entries.append(entry)
    manifest = emb.EmbeddingManifest(entries)
    word_tables = manifest.load_tables("word")
    subword_tables = []
    bpe_models = {}
    char_table = None
    if model_cfg.variant == "hme":
        subword_tables = manifest.load_tables("subword")
        for entry in manifest.by_level("subword"):
            bpe_models[entry.language_id] = load_bpe_merges(entry.merges,
                                                            entry.language_id)
        char_table = emb.init_char_table(header["char_alphabet"],
                                         header["char_dim"], seed=0)
    if model_cfg.variant == "random":
        word_tables = [me.random_baseline(header["random_vocab"],
                                          model_cfg.random_dim, seed=0)]
    resources = mdl.Resources(labels=list(header["labels"]),
                              word_tables=word_tables,
                              subword_tables=subword_tables,
                              bpe_models=bpe_models, char_table=char_table)
    model = mdl.SequenceTagger(model_cfg, resources, seed=header["seed"])
    model.load_state(arrays)
    return model, header


def _check_tag_compatibility(model: mdl.SequenceTagger, sentences) -> None:
    known = set(model.crf.labels)
    seen = {t for s in sentences for t in (s.labels or [])}
    unknown = seen - known
    if unknown:
        raise ConfigError(f"data uses tags the model does not know: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    train_set = read_conll(cfg.data.get("train", ""))
    dev_set = read_conll(cfg.data.get("dev", ""))
    if not train_set or not dev_set:
        raise ConfigError("train and dev data must be non-empty")
    resources = _build_resources(cfg, train_set)
    model = mdl.SequenceTagger(cfg.model, resources, seed=cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    result = tr.train(model, train_set, dev_set, cfg.train,
                      log_path=os.path.join(cfg.output_dir, "metrics.jsonl"),
                      quiet=args.quiet)
    mdl.save_checkpoint(os.path.join(cfg.output_dir, "model.ckpt"), model, cfg.echo)

    preds = model.predict(dev_set)
    write_conll(dev_set, os.path.join(cfg.output_dir, "dev_predictions.conll"),
                tags=preds)
    repairs = sum(s.repairs for s in dev_set)
    report = tr.entity_f1([s.labels for s in dev_set], preds,
                          counters={"iob_repairs": repairs,
                                    **dict(model.featurizer.counters)})
    with open(os.path.join(cfg.output_dir, "dev_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(os.path.join(cfg.output_dir, "dev_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_text() + "\n")
    print(f"best dev F1 {result.best_f1:.4f} at epoch {result.best_epoch} "
          f"({result.epochs_run} epochs run)")
    print(report.to_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    data = read_conll(args.data)
    if not data:
        raise ConfigError(f"no sentences in {args.data}")
    _check_tag_compatibility(model, data)
    preds = model.predict(data)
    repairs = sum(s.repairs for s in data)
    report = tr.entity_f1([s.labels for s in data], preds,
                          counters={"iob_repairs": repairs,
                                    **dict(model.featurizer.counters)})
    print(report.to_text())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    sentences = read_tokens(args.input)
    preds = model.predict(sentences) if sentences else []
    out_path = args.out or "-"
    if out_path == "-":
        for sent, tags in zip(sentences, preds):
            for tok, tag in zip(sent.raw_tokens, tags):
                print(f"{tok}\t{tag}")
            print()
    else:
        write_conll(sentences, out_path, tags=preds)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    if len(args.predictions) < 1:
        raise ConfigError("ensemble needs at least one prediction file")
    runs = [read_conll(p) for p in args.predictions]
    counts = {len(r) for r in runs}
    if len(counts) != 1:
        raise ConfigError("prediction files disagree on sentence count")
    base = runs[0]
    voted: list[list[str]] = []
    for s_idx, sent in enumerate(base):
        seqs = []
        for r_idx, run in enumerate(runs):
            other = run[s_idx]
            if len(other) != len(sent):
                raise ConfigError(
                    f"sentence {s_idx}: length mismatch between "
                    f"{args.predictions[0]} and {args.predictions[r_idx]}")
            seqs.append(other.labels)
        voted.append(tr.majority_vote(seqs))
    write_conll(base, args.out, tags=voted)
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    if model.config.variant not in ("hme", "mme_word", "random"):
        raise ConfigError(
            f"variant {model.config.variant!r} has no attention weights to export")
    data = read_conll(args.data)
    if not data:
        raise ConfigError(f"no sentences in {args.data}")
    os.makedirs(args.out_dir, exist_ok=True)
    tags, alpha_w, alpha_s = model.predict_with_attention(data)
    word_langs = [t.language_id for t in model.resources.word_tables]
    sub_langs = [t.language_id for t in model.resources.subword_tables]
    me.write_attention_tsv(os.path.join(args.out_dir, "attention.tsv"),
                           data, alpha_w,
                           alpha_s if model.config.variant == "hme" else None,
                           word_langs, sub_langs)
    summary = tr.attention_summary(alpha_w, tags)
    tr.write_attention_summary_tsv(
        os.path.join(args.out_dir, "attention_summary.tsv"), summary, word_langs)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hme",
        description="Hierarchical meta-embeddings with a transformer-CRF tagger")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labeled data")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="tag tokens with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("input", help="CoNLL file or one token per line")
    p.add_argument("--out", default=None, help="output file (stdout by default)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="majority-vote prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("export-attention", help="dump attention weights as TSV")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConllFormatError, emb.EmbeddingFormatError,
            mdl.CheckpointError, FileNotFoundError) as exc:
        print(f"hme: error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericsError, tr.DivergenceError) as exc:
        print(f"hme: error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
