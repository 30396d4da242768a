"""Command-line entry points: train, evaluate, predict, gen-synth, census."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synth
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import (
    DataError,
    LabelSpace,
    Vocabulary,
    build_vocab,
    encode,
    load_corpus,
    load_embeddings,
    load_label_space,
    split_train_val,
    tokenize,
    write_jsonl,
)
from .evaluation import decode, evaluate
from .model import CheckpointError, JointModel, ModelConfig, load_checkpoint, parameter_census, save_checkpoint, vocab_hash
from .training import run_repeated

log = logging.getLogger("acsa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    out = {
        "variant": getattr(args, "variant", None),
        "tau": getattr(args, "tau", None),
        "seed": getattr(args, "seed", None),
        "runs": getattr(args, "runs", None),
        "train_path": getattr(args, "data", None),
        "labels_path": getattr(args, "labels", None),
        "embeddings_path": getattr(args, "embeddings", None),
        "out_dir": getattr(args, "out", None),
    }
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _model_config(cfg: RunConfig, vocab_size: int, labels: LabelSpace) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        n_aspects=labels.n_aspects,
        n_polarities=labels.n_polarities,
        d_w=cfg.d_w,
        d_s=cfg.d_s,
        hidden=cfg.hidden,
        attn_dim=cfg.attn_dim or None,
        variant=cfg.variant,
        dropout=cfg.dropout_p,
        freeze_embeddings=cfg.freeze_embeddings,
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.train_path:
        raise ConfigError("train_path is not set (use --data or the [data] section)")
    if not cfg.labels_path:
        raise ConfigError("labels_path is not set (use --labels or the [data] section)")
    cfg.validate()
    labels = load_label_space(cfg.labels_path)
    raws = load_corpus(cfg.train_path, cfg.data_format or None)
    tokens = [tokenize(r.text, cfg.tokenizer) for r in raws]
    order_train, order_val = split_train_val(list(range(len(raws))), cfg.val_ratio, cfg.seed)
    vocab = build_vocab([tokens[i] for i in order_train], cfg.min_count)
    examples = [encode(r, vocab, labels, cfg.tokenizer) for r in raws]
    train_set = [examples[i] for i in order_train]
    val_set = [examples[i] for i in order_val]
    test_set = None
    if cfg.test_path:
        test_set = [encode(r, vocab, labels, cfg.tokenizer) for r in load_corpus(cfg.test_path, cfg.data_format or None)]

    def factory(seed):
        matrix = None
        if cfg.embeddings_path:
            loaded = load_embeddings(cfg.embeddings_path, vocab, cfg.d_w, seed=seed)
            log.info("embedding coverage %.4f (%d tokens)", loaded.coverage, loaded.found)
            matrix = loaded.matrix
        return JointModel(_model_config(cfg, len(vocab), labels), seed=seed, embeddings=matrix)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    census = _census_record(factory(cfg.seed))
    _write_json(out / "census.json", census)
    print(json.dumps({"census": census["by_role"]}, sort_keys=True))

    logs = {}

    def on_epoch(run, record):
        logs.setdefault(run, []).append(record.to_json())
        log.info("run %d epoch %d loss %.4f val acsa f1 %.4f", run, record.epoch, record.train_loss, record.val["acsa_f1"])

    result = run_repeated(factory, train_set, val_set, cfg.train_config(), eval_examples=test_set, on_epoch=on_epoch)
    for r, outcome in enumerate(result.runs):
        run_dir = out / f"run{r}"
        run_dir.mkdir(exist_ok=True)
        (run_dir / "train_log.jsonl").write_text("\n".join(logs.get(r, [])) + "\n", encoding="utf-8")
        train_file_report = evaluate(outcome.model, examples, cfg.tau, cfg.batch_size)
        meta = {
            "vocab": vocab.tokens,
            "vocab_hash": vocab_hash(vocab.tokens),
            "labels": {"aspects": list(labels.aspects), "polarities": list(labels.polarities)},
            "tokenizer": cfg.tokenizer,
            "tau": cfg.tau,
            "seed": outcome.seed,
            "best_epoch": outcome.result.best.epoch,
            "val_acsa_f1": outcome.result.best.val_f1,
            "config_hash": outcome.result.best.config_hash,
            "train_file_report": train_file_report.to_dict(),
        }
        save_checkpoint(run_dir / "checkpoint.npz", outcome.model, meta)
        _write_json(run_dir / "report.json", outcome.report.to_dict())
    _write_json(out / "report.json", result.report.to_dict())
    (out / "report.txt").write_text(result.report.to_text(), encoding="utf-8")
    sys.stdout.write(result.report.to_text())
    return EXIT_OK


def _load_for_inference(checkpoint):
    model, meta = load_checkpoint(checkpoint)
    try:
        vocab = Vocabulary(list(meta["vocab"]))
        labels = LabelSpace(meta["labels"]["aspects"], meta["labels"]["polarities"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{checkpoint}: checkpoint metadata is incomplete ({exc})") from exc
    if vocab_hash(vocab.tokens) != meta.get("vocab_hash"):
        raise CheckpointError(f"{checkpoint}: vocabulary hash mismatch")
    return model, meta, vocab, labels


def cmd_evaluate(checkpoint, data, tau=None, labels_path=None, out=None, data_format=None, batch_size=32) -> int:
    model, meta, vocab, labels = _load_for_inference(checkpoint)
    if labels_path:
        given = load_label_space(labels_path)
        if given != labels:
            raise DataError(f"label space mismatch: checkpoint has {labels.describe()}, {labels_path} has {given.describe()}")
    tau = meta.get("tau", 0.25) if tau is None else tau
    examples = [encode(r, vocab, labels, meta.get("tokenizer", "whitespace_punct")) for r in load_corpus(data, data_format)]
    report = evaluate(model, examples, tau, batch_size)
    sys.stdout.write(report.to_text())
    if out:
        out = Path(out)
        if out.suffix == ".txt":
            out.write_text(report.to_text(), encoding="utf-8")
        else:
            _write_json(out, {"tau": tau, "report": report.to_dict()})
    return EXIT_OK


def predict_texts(model, vocab, labels, texts, tokenizer="whitespace_punct", tau=0.25, attention=False):
    """Per-text predictions; a failing text yields an ``error`` entry."""
    results = []
    for text in texts:
        try:
            tokens = tokenize(text, tokenizer)
        except DataError as exc:
            results.append({"text": text, "error": str(exc)})
            continue
        ids = np.array(vocab.encode(tokens), dtype=np.int64)
        out = model.forward(ids, train=False)
        y_a, y_s = out.y_hat_A[0], out.y_hat_S[0]
        aspects, pairs = decode(y_a, y_s, tau)
        items = []
        for j, k in sorted(pairs):
            item = {
                "aspect": labels.aspects[j],
                "polarity": labels.polarities[k],
                "probability": float(y_a[j]),
                "sentiment": {p: float(v) for p, v in zip(labels.polarities, y_s[j])},
            }
            if attention:
                item["attention"] = {name: [float(v) for v in maps[0, j]] for name, maps in out.attention.items()}
            items.append(item)
        record = {"text": text, "predictions": items}
        if attention:
            record["tokens"] = tokens
        results.append(record)
    return results


def cmd_predict(checkpoint, texts, tau=None, attention=False, out=None) -> int:
    model, meta, vocab, labels = _load_for_inference(checkpoint)
    tau = meta.get("tau", 0.25) if tau is None else tau
    results = predict_texts(model, vocab, labels, texts, meta.get("tokenizer", "whitespace_punct"), tau, attention)
    lines = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in results)
    sys.stdout.write(lines)
    if out:
        Path(out).write_text(lines, encoding="utf-8")
    return EXIT_DATA if any("error" in r for r in results) else EXIT_OK


def cmd_gen_synth(out_dir, n=50, seed=0) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "train.jsonl", synth.generate(n, seed))
    write_jsonl(out / "test.jsonl", synth.generate(max(n // 5, 2), seed + 1))
    (out / "labels.txt").write_text(synth.synthetic_label_space().to_text(), encoding="utf-8")
    cfg = RunConfig(
        train_path=str(out / "train.jsonl"),
        labels_path=str(out / "labels.txt"),
        data_format="jsonl",
        out_dir=str(out / "runs"),
    )
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"wrote {n} training texts, labels and config to {out}")
    return EXIT_OK


def _census_record(model) -> dict:
    return {
        "variant": model.config.variant,
        "n_aspects": model.config.n_aspects,
        "by_category": parameter_census(model, "category"),
        "by_role": parameter_census(model, "role"),
        "by_group": parameter_census(model, "group"),
        "total": int(sum(parameter_census(model, "category").values())),
    }


def cmd_census(cfg: RunConfig, vocab_size=None) -> int:
    if not cfg.labels_path:
        raise ConfigError("labels_path is not set (use --labels or the [data] section)")
    cfg.validate()
    labels = load_label_space(cfg.labels_path)
    if vocab_size is None:
        if cfg.train_path:
            raws = load_corpus(cfg.train_path, cfg.data_format or None)
            vocab_size = len(build_vocab([tokenize(r.text, cfg.tokenizer) for r in raws], cfg.min_count))
        else:
            vocab_size = 2
    model = JointModel(_model_config(cfg, vocab_size, labels), seed=cfg.seed)
    print(json.dumps(_census_record(model), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acsa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(p):
        p.add_argument("--config", help="INI file with [train], [model] and [data] sections")
        p.add_argument("--variant", choices=("full", "without_share", "without_cae"))
        p.add_argument("--seed", type=int)
        p.add_argument("--data", help="training corpus (.xml or .jsonl)")
        p.add_argument("--labels", help="label-space file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("train", help="train and evaluate over several seeds")
    config_flags(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--runs", type=int)
    p.add_argument("--embeddings", help="pretrained embedding text file")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="label-space file that must match the checkpoint")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", help="report file (.json or .txt)")

    p = sub.add_parser("predict", help="predict aspect-sentiment pairs for texts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", action="append", default=[], help="text to analyse (repeatable)")
    p.add_argument("--data", help="file with one text per line")
    p.add_argument("--tau", type=float)
    p.add_argument("--attention", action="store_true", help="include attention weights")
    p.add_argument("--out", help="write JSON lines here as well")

    p = sub.add_parser("gen-synth", help="write the seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("census", help="count trainable parameters")
    config_flags(p)
    p.add_argument("--vocab-size", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            return cmd_train(load_config(args.config, _overrides(args)))
        if args.command == "census":
            return cmd_census(load_config(args.config, _overrides(args)), args.vocab_size)
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint, args.data, args.tau, args.labels, args.out)
        if args.command == "predict":
            texts = list(args.text)
            if args.data:
                try:
                    texts += Path(args.data).read_text(encoding="utf-8").splitlines()
                except OSError as exc:
                    raise DataError(f"{args.data}: cannot read ({exc.strerror})") from exc
            if not texts:
                raise UsageError("predict needs --text or --data")
            return cmd_predict(args.checkpoint, texts, args.tau, args.attention, args.out)
        if args.command == "gen-synth":
            return cmd_gen_synth(args.out, args.n, args.seed)
    except (ConfigError, UsageError) as exc:
        print(f"acsa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"acsa: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("unhandled error", exc_info=True)
        print(f"acsa: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
