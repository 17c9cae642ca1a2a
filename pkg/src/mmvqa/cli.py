"""Command-line entry point: ``mmvqa <subcommand> [--config FILE] [--key VALUE ...]``.

Every setting is a key. Keys come from built-in defaults, then an optional
``key=value`` config file, then command-line flags (``--batch-size 16`` sets
``batch_size``). Unknown keys are errors.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/malformed files, checkpoints), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (
    SyntheticSpec,
    VqaRecord,
    gen_synthetic,
    load_caption_corpus,
    load_vqa_dataset,
    text_only_ceiling,
)
from .errors import ConfigError, ContractError, DataError, EmptyLossError, MMVQAError, ModeError, NumericError, ShapeError
from .evaluation import (
    CategoryRouter,
    DirectPredictor,
    RoutedPredictor,
    evaluate,
    export_predictions,
    oracle_router,
)
from .interpretability import attention_to_image, render_heatmap
from .model import CATEGORIES, ModelConfig
from .numerics import no_grad
from .tokenizer import Vocab, build_vocab, tokenize
from .training import (
    ImageStore,
    TrainConfig,
    default_workers,
    finetune,
    load_checkpoint,
    pretrain,
    train_router,
)
from .vision import AugmentConfig, VisionConfig

log = logging.getLogger("mmvqa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- key tables ------------------------------------------------------------------------

_INTS = lambda s: tuple(int(x) for x in s.split(",") if x.strip())  # noqa: E731
_STRS = lambda s: tuple(x.strip() for x in s.split(",") if x.strip())  # noqa: E731


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _model_keys():
    base = ModelConfig(vocab_size=6)
    keys = []
    for f in fields(ModelConfig):
        if f.name in ("vocab_size", "vision", "num_answers"):
            continue
        v = getattr(base, f.name)
        keys.append((f.name, v, type(v), f"model {f.name}"))
    for f in fields(VisionConfig):
        v = getattr(base.vision, f.name)
        kind = _INTS if isinstance(v, tuple) else _bool if isinstance(v, bool) else type(v)
        keys.append((f"vision_{f.name}", v, kind, f"image encoder {f.name}"))
    return keys


def _train_keys(phase):
    t = TrainConfig(phase=phase)
    return [
        ("lr", t.lr, float, "learning rate"),
        ("patience", t.patience, int, "plateau patience (epochs)"),
        ("factor", t.factor, float, "plateau decay factor"),
        ("min_lr", t.min_lr, float, "learning-rate floor"),
        ("batch_size", t.batch_size, int, "batch size"),
        ("max_epochs", t.max_epochs, int, "maximum epochs"),
        ("early_stop", t.early_stop, int, "stop after this many epochs without improvement"),
        ("clip_norm", t.clip_norm, float, "global gradient-norm clip (0 disables)"),
        ("val_fraction", t.val_fraction, float, "held-out fraction when no validation file is given"),
        ("augment", True, _bool, "enable image augmentation"),
    ]


SEED = [("seed", 0, int, "random seed")]

KEYS = {
    "gen-synth": [
        ("out", None, str, "output directory"),
        *[(f.name, f.default, _STRS if isinstance(f.default, tuple) else type(f.default), f"synthetic {f.name}")
          for f in fields(SyntheticSpec) if f.name not in ("seed", "object_size")],
        *SEED,
    ],
    "build-vocab": [
        ("corpus", None, str, "caption corpus TSV"),
        ("vqa", "", str, "comma-separated VQA TSVs whose questions are added"),
        ("out", None, str, "vocabulary file to write"),
        ("size", 1000, int, "target vocabulary size"),
        ("min_freq", 1, int, "minimum pair frequency for a merge"),
        *SEED,
    ],
    "pretrain": [
        ("corpus", None, str, "caption corpus TSV"),
        ("val_corpus", "", str, "validation corpus TSV (default: seeded split)"),
        ("vocab", None, str, "vocabulary file"),
        ("out", None, str, "checkpoint to write"),
        ("keyword_rate", 1.0, float, "probability of masking each keyword"),
        ("fallback_rate", 0.15, float, "per-token mask rate for captions without keywords"),
        *_train_keys("pretrain"),
        *_model_keys(),
        *SEED,
    ],
    "finetune": [
        ("train", None, str, "training VQA TSV"),
        ("val", "", str, "validation VQA TSV (default: seeded split)"),
        ("vocab", None, str, "vocabulary file"),
        ("init", "", str, "pretrained checkpoint (ignored by the np variant)"),
        ("out", None, str, "checkpoint to write"),
        ("task", "vqa", str, "vqa (answer classifier) or router (question-category classifier)"),
        ("variant", "general", str, "general, exclusive or np"),
        ("category", "", str, "category for the exclusive variant"),
        *_train_keys("finetune"),
        *_model_keys(),
        *SEED,
    ],
    "evaluate": [
        ("test", None, str, "test VQA TSV"),
        ("variant", "general", str, "general, exclusive or np"),
        ("ckpt", "", str, "finetuned checkpoint (general and np variants)"),
        ("prefix", "", str, "exclusive checkpoints are <prefix>.<category>.ckpt"),
        ("router", "model", str, "exclusive routing: model (<prefix>.router.ckpt) or oracle"),
        ("predictions", "", str, "write per-sample predictions TSV here"),
        ("label", "", str, "row label in the printed table"),
        *SEED,
    ],
    "predict": [
        ("ckpt", None, str, "finetuned checkpoint"),
        ("image", None, str, "PPM/PGM image"),
        ("question", None, str, "question text"),
        *SEED,
    ],
    "attnmap": [
        ("ckpt", None, str, "finetuned checkpoint (spatial feature mode)"),
        ("image", None, str, "PPM/PGM image"),
        ("question", None, str, "question text"),
        ("out", None, str, "output stem; writes <out>.attn.pgm and <out>.attn.ppm"),
        ("reduction", "last_layer_mean_heads", str, "last_layer_mean_heads or rollout"),
        ("alpha", 0.5, float, "overlay blend weight"),
        ("overlay", True, _bool, "also write the colour overlay"),
        *SEED,
    ],
}

HELP = {
    "gen-synth": "write the synthetic benchmark (images, captions, VQA splits, boxes)",
    "build-vocab": "build a subword vocabulary from a caption corpus",
    "pretrain": "masked-language-model pretraining on image+caption pairs",
    "finetune": "train the VQA answer classifier (or the category router)",
    "evaluate": "score a model on a VQA test file and print the category table",
    "predict": "answer one question about one image",
    "attnmap": "render the attention heatmap for one image and question",
}


def _fmt(v):
    if v is None:
        return "(required)"
    if v == "":
        return "(none)"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def build_parser():
    parser = _Parser(prog="mmvqa", description="Multimodal BERT for medical-style VQA at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, keys in KEYS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name] + ". Every key may also be set in --config.")
        p.add_argument("--config", help="key=value file; flags override it")
        for key, default, _, text in keys:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                           help=f"{text} (key {key}, default: {_fmt(default)})")
    return parser


def read_config(path, allowed):
    """Parse a ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path} line {no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise ConfigError(f"{path} line {no}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(command, args):
    keys = {k: (d, kind) for k, d, kind, _ in KEYS[command]}
    raw = {}
    if args.config:
        raw.update(read_config(args.config, keys))
    for k in keys:
        v = getattr(args, k)
        if v is not None:
            raw[k] = v
    resolved = {}
    for k, (default, kind) in keys.items():
        if k in raw:
            try:
                resolved[k] = kind(raw[k])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"key {k}: cannot parse {raw[k]!r} ({exc})") from exc
        elif default is None:
            raise ConfigError(f"key {k} is required (--{k.replace('_', '-')} or in --config)")
        else:
            resolved[k] = default
    return resolved


def echo(command, cfg, out):
    print(f"# mmvqa {command}", file=out)
    for k in sorted(cfg):
        print(f"{k}={_fmt(cfg[k])}", file=out)
    print(f"threads={default_workers()}", file=out)
    print(f"seed={cfg['seed']}", file=out)


def _model_config(cfg, vocab_size):
    vision = VisionConfig(**{f.name: cfg[f"vision_{f.name}"] for f in fields(VisionConfig)})
    kw = {f.name: cfg[f.name] for f in fields(ModelConfig) if f.name in cfg}
    return ModelConfig(vocab_size=vocab_size, vision=vision, **kw)


def _train_config(cfg, phase, **extra):
    keys = ("lr", "patience", "factor", "min_lr", "batch_size", "max_epochs", "early_stop", "clip_norm", "val_fraction", "seed")
    aug = AugmentConfig() if cfg["augment"] else AugmentConfig(enabled=False)
    return TrainConfig(phase=phase, augment=aug, workers=default_workers(), **{k: cfg[k] for k in keys}, **extra)


# -- commands ----------------------------------------------------------------------------


def cmd_gen_synth(cfg, out):
    kw = {f.name: cfg[f.name] for f in fields(SyntheticSpec) if f.name in cfg}
    spec = SyntheticSpec(**kw)
    files = gen_synthetic(spec, cfg["out"])
    for k, p in files.items():
        print(f"wrote {k}: {p}", file=out)
    print(f"text_only_ceiling={text_only_ceiling(spec):.6f}", file=out)


def cmd_build_vocab(cfg, out):
    texts = [r.caption for r in load_caption_corpus(cfg["corpus"])]
    for path in filter(None, (s.strip() for s in cfg["vqa"].split(","))):
        texts += [r.question for r in load_vqa_dataset(path)]
    vocab = build_vocab(texts, cfg["size"], cfg["min_freq"])
    vocab.save(cfg["out"])
    print(f"wrote {len(vocab)} tokens to {cfg['out']}", file=out)


def cmd_pretrain(cfg, out):
    vocab = Vocab.load(cfg["vocab"])
    corpus = load_caption_corpus(cfg["corpus"])
    val = load_caption_corpus(cfg["val_corpus"]) if cfg["val_corpus"] else None
    tc = _train_config(cfg, "pretrain", keyword_rate=cfg["keyword_rate"], fallback_rate=cfg["fallback_rate"])
    ck = pretrain(corpus, tc, _model_config(cfg, len(vocab)), vocab, val_corpus=val, out_path=cfg["out"])
    print(f"best epoch {ck.epoch} val_loss {ck.best_val:.6f}; wrote {cfg['out']}", file=out)


def _variant(name):
    table = {"general": "general", "exclusive": "exclusive", "np": "non_pretrained", "non_pretrained": "non_pretrained"}
    if name not in table:
        raise ConfigError(f"variant must be general, exclusive or np, got {name!r}")
    return table[name]


def cmd_finetune(cfg, out):
    vocab = Vocab.load(cfg["vocab"])
    train = load_vqa_dataset(cfg["train"])
    val = load_vqa_dataset(cfg["val"]) if cfg["val"] else None
    variant = _variant(cfg["variant"])
    init = None
    if cfg["init"] and variant != "non_pretrained":
        init = load_checkpoint(cfg["init"])
        model_cfg = replace(init.config, dropout=cfg["dropout"])
        if init.vocab != vocab:
            raise DataError(f"{cfg['init']}: checkpoint vocabulary differs from {cfg['vocab']}")
    else:
        model_cfg = _model_config(cfg, len(vocab))
    if cfg["task"] == "router":
        tc = _train_config(cfg, "finetune")
        ck = train_router(train, tc, model_cfg, vocab, init=init, val_records=val, out_path=cfg["out"])
    elif cfg["task"] == "vqa":
        category = cfg["category"] or None
        tc = _train_config(cfg, "finetune", variant=variant, category=category)
        ck = finetune(train, init, tc, model_cfg, vocab, val_records=val, out_path=cfg["out"])
    else:
        raise ConfigError(f"task must be vqa or router, got {cfg['task']!r}")
    print(f"best epoch {ck.epoch} val_loss {ck.best_val:.6f}; wrote {cfg['out']}", file=out)


def _load_required(path, what):
    if not path:
        raise ConfigError(f"{what} checkpoint path is required")
    if not Path(path).is_file():
        raise DataError(f"missing {what} checkpoint: {path}")
    return load_checkpoint(path)


def cmd_evaluate(cfg, out):
    records = load_vqa_dataset(cfg["test"])
    variant = _variant(cfg["variant"])
    if variant == "exclusive":
        if not cfg["prefix"]:
            raise ConfigError("the exclusive variant needs --prefix")
        experts = {}
        for cat in sorted({r.category for r in records}, key=CATEGORIES.index):
            experts[cat] = DirectPredictor(_load_required(f"{cfg['prefix']}.{cat}.ckpt", f"{cat} expert"))
        if cfg["router"] == "oracle":
            router = oracle_router
        elif cfg["router"] == "model":
            router = CategoryRouter(_load_required(f"{cfg['prefix']}.router.ckpt", "router"))
        else:
            raise ConfigError(f"router must be model or oracle, got {cfg['router']!r}")
        predictor = RoutedPredictor(router, experts)
    else:
        predictor = DirectPredictor(_load_required(cfg["ckpt"], variant))
    report = evaluate(records, predictor)
    label = cfg["label"] or {"general": "MMBERT General", "non_pretrained": "MMBERT NP", "exclusive": "MMBERT Exclusive"}[variant]
    print(report.table(label), file=out)
    if cfg["predictions"]:
        export_predictions(report, cfg["predictions"])
        print(f"wrote {cfg['predictions']}", file=out)


def _single(cfg):
    ck = _load_required(cfg["ckpt"], "model")
    pred = DirectPredictor(ck, batch_size=1)
    rec = VqaRecord(cfg["image"], "modality", cfg["question"], "-")
    return ck, pred, rec


def cmd_predict(cfg, out):
    _, pred, rec = _single(cfg)
    print(pred([rec])[0], file=out)


def cmd_attnmap(cfg, out):
    ck, pred, rec = _single(cfg)
    img = pred.store.prepare(rec.image_path)
    model = pred.model
    with no_grad():
        seq = model.assemble_sequence(model.encode_images(img[None]), [tokenize(rec.question, ck.vocab).ids])
        enc = model.encoder_forward(seq)
    hm = attention_to_image(enc, seq, cfg["reduction"])
    original = pred.store.get(rec.image_path)
    for p in render_heatmap(hm, original, cfg["out"], alpha=cfg["alpha"], overlay=cfg["overlay"]):
        print(f"wrote {p}", file=out)
    r, c = np.unravel_index(int(np.argmax(hm.weights)), hm.weights.shape)
    print(f"peak cell row={r} col={c} weight={hm.weights[r, c]:.6f}", file=out)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "attnmap": cmd_attnmap,
}


def run(argv=None, out=None, err=None):
    """Run the CLI and return its exit code (never raises for expected failures)."""
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve(args.command, args)
        echo(args.command, cfg, out)
        COMMANDS[args.command](cfg, out)
        return 0
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        print(str(exc), file=err)
        return 1
    except (ConfigError, ContractError, ModeError, ShapeError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=err)
        return 2
    except (NumericError, EmptyLossError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=err)
        return 3
    except MMVQAError as exc:
        print(f"error: {exc}", file=err)
        return 1


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
