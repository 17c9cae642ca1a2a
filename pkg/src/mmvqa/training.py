"""Adam, the plateau schedule, the pretrain/finetune/router loops and checkpoints.

Randomness is derived per use from the run seed (``[seed, epoch, index]``
seed sequences), so batch order, augmentation, masking and dropout do not
depend on how many workers prepared the data.
"""
from __future__ import annotations

import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import AnswerSpace, build_answer_space
from .errors import (
    CheckpointVersionError,
    ConfigError,
    ContractError,
    CorruptCheckpointError,
    DataError,
    FingerprintError,
    TruncatedCheckpointError,
)
from .model import CATEGORIES, MMBert, ModelConfig
from .numerics import Tape, Tensor, no_grad, ops
from .numerics.ops import IGNORE_INDEX
from .tokenizer import MaskPolicy, Vocab, mask_keywords, tokenize
from .vision import AugmentConfig, augment, decode_image, resize_bilinear

log = logging.getLogger(__name__)

PHASE_DEFAULTS = {
    "pretrain": dict(lr=2e-5, patience=5, max_epochs=60),
    "finetune": dict(lr=1e-4, patience=10, max_epochs=100),
}
VARIANTS = ("general", "exclusive", "non_pretrained")
VAL_STREAM = 1 << 20  # seed-sequence slot reserved for validation randomness


def default_workers():
    env = os.environ.get("MMVQA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"MMVQA_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError("MMVQA_THREADS must be at least 1")
        return n
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# -- optimizer and schedule --------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr, **kw):
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, lr, **kw)


def adam_step(params, grads, state, lr=None):
    """One bias-corrected Adam update in place; clears each parameter's grad.

    ``grads`` maps parameter names to arrays. Passing ``None`` reads each
    parameter's ``.grad``.
    """
    lr = state.lr if lr is None else lr
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for k in params:
        if grads.get(k) is None:
            raise ContractError(f"missing gradient for parameter {k!r}")
        if k not in state.m:
            raise ContractError(f"optimizer state has no moments for parameter {k!r}")
    state.t += 1
    state.lr = lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.data.dtype)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        p.grad = None


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return total


def plateau_schedule(history, cfg):
    """Learning rate after the validation losses in ``history``.

    Every run of ``cfg.patience`` epochs without a strictly lower loss than
    the best so far multiplies the rate by ``cfg.factor``; the run counter
    restarts after each decay and on every improvement.
    """
    best = float("inf")
    streak = decays = 0
    for loss in history:
        if loss < best:
            best, streak = loss, 0
        else:
            streak += 1
            if streak >= cfg.patience:
                decays += 1
                streak = 0
    return max(cfg.lr * cfg.factor**decays, cfg.min_lr)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "pretrain"
    lr: float | None = None
    patience: int | None = None
    factor: float = 0.1
    min_lr: float = 1e-7
    batch_size: int = 32
    max_epochs: int | None = None
    seed: int = 0
    early_stop: int = 20
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    variant: str = "general"
    category: str | None = None
    keyword_rate: float = 1.0
    fallback_rate: float = 0.15
    workers: int = 1

    def __post_init__(self):
        if self.phase not in PHASE_DEFAULTS:
            raise ConfigError(f"phase must be one of {sorted(PHASE_DEFAULTS)}, got {self.phase!r}")
        for key, value in PHASE_DEFAULTS[self.phase].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.early_stop < 1:
            raise ConfigError("patience and early_stop must be at least 1")
        if not 0 < self.factor < 1:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.workers < 1:
            raise ConfigError("batch_size, max_epochs and workers must be at least 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "exclusive" and self.category not in CATEGORIES:
            raise ConfigError(f"exclusive variant needs a category from {CATEGORIES}, got {self.category!r}")

    @property
    def mask_policy(self):
        return MaskPolicy(self.keyword_rate, self.fallback_rate)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"MMBC"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float32 array
    vocab: Vocab
    epoch: int = 0
    best_val: float = float("inf")
    rng_state: tuple = ()
    optimizer: OptimizerState | None = None
    answers: tuple = ()
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, vocab, **kw):
        params = {k: np.array(p.data, dtype=np.float32) for k, p in model.params.items()}
        return cls(model.cfg, params, vocab, **kw)

    def model(self, dtype=np.float32):
        params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return MMBert(self.config, dtype=dtype, params=params)

    @property
    def answer_space(self):
        return AnswerSpace(self.answers)


def _rng_state(gen):
    st = gen.bit_generator.state
    return (st["bit_generator"], st["state"]["state"], st["state"]["inc"], st["has_uint32"], st["uinteger"])


def _manifest(ck):
    lines = [f"fingerprint\t{ck.config.fingerprint()}", f"epoch\t{ck.epoch}", f"best\t{float(ck.best_val)!r}"]
    if ck.rng_state:
        lines.append("rng\t" + "\t".join(str(x) for x in ck.rng_state))
    for k, v in ck.config.items():
        lines.append(f"config\t{k}\t{_fmt(v)}")
    lines += [f"vocab\t{t}" for t in ck.vocab.tokens]
    lines += [f"answer\t{a}" for a in ck.answers]
    for k in sorted(ck.meta):
        lines.append(f"meta\t{k}\t{ck.meta[k]}")
    tensors = [(k, v) for k, v in ck.params.items()]
    if ck.optimizer is not None:
        o = ck.optimizer
        lines.append(f"optimizer\t{o.t}\t{o.lr!r}\t{o.beta1!r}\t{o.beta2!r}\t{o.eps!r}")
        tensors += [(f"adam.m.{k}", v) for k, v in o.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in o.v.items()]
    for k, v in tensors:
        lines.append(f"tensor\t{k}\tf32\t{v.ndim}\t{','.join(str(n) for n in v.shape)}")
    return "\n".join(lines) + "\n", tensors


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def checkpoint_bytes(ck):
    text, tensors = _manifest(ck)
    for k, _ in tensors:
        if "\t" in k or "\n" in k:
            raise ContractError(f"tensor name {k!r} contains a tab or newline")
    head = text.encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for _, v in tensors)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload + struct.pack("<I", crc)


def save_checkpoint(ck, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect=None):
    """Read a checkpoint; ``expect`` (a ModelConfig) must match its fingerprint."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(buf) < 12:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    version, n_head = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    if len(buf) < 12 + n_head:
        raise TruncatedCheckpointError(f"{path}: truncated manifest")
    try:
        text = buf[12 : 12 + n_head].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: manifest is not UTF-8") from exc
    try:
        parsed = _parse_manifest(text)
    except (ValueError, KeyError, IndexError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    specs = parsed["tensors"]
    need = sum(4 * int(np.prod(shape, dtype=np.int64)) for _, shape in specs)
    start = 12 + n_head
    if len(buf) < start + need + 4:
        raise TruncatedCheckpointError(f"{path}: payload has {len(buf) - start} bytes, expected {need + 4}")
    if len(buf) > start + need + 4:
        raise CorruptCheckpointError(f"{path}: {len(buf) - start - need - 4} trailing bytes")
    payload = buf[start : start + need]
    (crc,) = struct.unpack_from("<I", buf, start + need)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    arrays, off = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    try:
        config = ModelConfig.from_items(parsed["config"])
    except (ConfigError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: invalid stored config ({exc})") from exc
    if config.fingerprint() != parsed["fingerprint"]:
        raise FingerprintError(f"{path}: stored fingerprint does not match the stored config")
    if expect is not None and expect.fingerprint() != parsed["fingerprint"]:
        raise FingerprintError(
            f"{path}: written for config {parsed['fingerprint']}, loading model has {expect.fingerprint()}"
        )
    optimizer = None
    if parsed["optimizer"] is not None:
        t, lr, b1, b2, eps = parsed["optimizer"]
        m = {k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v.") :]: a for k, a in arrays.items() if k.startswith("adam.v.")}
        optimizer = OptimizerState(m, v, int(t), float(lr), float(b1), float(b2), float(eps))
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    try:
        vocab = Vocab(parsed["vocab"])
    except DataError as exc:
        raise CorruptCheckpointError(f"{path}: invalid stored vocabulary ({exc})") from exc
    return Checkpoint(
        config, params, vocab, int(parsed["epoch"]), float(parsed["best"]), parsed["rng"], optimizer,
        tuple(parsed["answers"]), parsed["meta"],
    )


def _parse_manifest(text):
    out = {"config": {}, "vocab": [], "answers": [], "meta": {}, "tensors": [], "optimizer": None, "rng": ()}
    for line in text.split("\n"):
        if not line:
            continue
        kind, *rest = line.split("\t")
        if kind in ("fingerprint", "epoch", "best"):
            out[kind] = rest[0]
        elif kind == "rng":
            out["rng"] = (rest[0], int(rest[1]), int(rest[2]), int(rest[3]), int(rest[4]))
        elif kind == "config":
            out["config"][rest[0]] = rest[1]
        elif kind == "vocab":
            out["vocab"].append(rest[0])
        elif kind == "answer":
            out["answers"].append(rest[0])
        elif kind == "meta":
            out["meta"][rest[0]] = rest[1]
        elif kind == "optimizer":
            out["optimizer"] = tuple(rest)
        elif kind == "tensor":
            name, dtype, rank, extents = rest
            if dtype != "f32":
                raise ValueError(f"unsupported dtype {dtype}")
            shape = tuple(int(x) for x in extents.split(",") if x)
            if len(shape) != int(rank):
                raise ValueError(f"rank {rank} does not match extents {extents}")
            out["tensors"].append((name, shape))
        else:
            raise ValueError(f"unknown manifest line kind {kind!r}")
    for key in ("fingerprint", "epoch", "best"):
        if key not in out:
            raise KeyError(key)
    return out


# -- data preparation ------------------------------------------------------------


class ImageStore:
    """Decodes each image once and serves float32 copies at the model's input size."""

    def __init__(self, size):
        self.size = size
        self._cache = {}

    def get(self, path):
        img = self._cache.get(path)
        if img is None:
            img = decode_image(path)
            self._cache[path] = img
        return img

    def prepare(self, path, aug_cfg=None, rng=None):
        img = self.get(path)
        if aug_cfg is not None and aug_cfg.enabled:
            img = augment(img, aug_cfg, rng)
        if img.shape[:2] != (self.size, self.size):
            img = resize_bilinear(img, self.size, self.size)
        return img


def _map(fn, items, workers):
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def split_validation(items, fraction, seed):
    """Seeded split into (train, val); val is empty when ``fraction`` is 0."""
    n = len(items)
    n_val = int(round(n * fraction))
    if n_val == 0 or n - n_val == 0:
        return list(items), []
    perm = np.random.default_rng([seed, VAL_STREAM, 1]).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    return [x for i, x in enumerate(items) if i not in val_idx], [x for i, x in enumerate(items) if i in val_idx]


# -- batch losses ------------------------------------------------------------------


def mlm_batch(model, images, inputs, labels, training=False, rng=None):
    """Forward one MLM batch; returns (loss or None, logits, gold ids, flat positions)."""
    feats = model.encode_images(images)
    seq = model.assemble_sequence(feats, inputs, labels)
    out = model.encoder_forward(seq, training=training, rng=rng)
    flat = seq.labels.reshape(-1)
    pos = np.nonzero(flat != IGNORE_INDEX)[0]
    if pos.size == 0:
        return None, None, flat[pos], pos
    logits = model.mlm_logits(out, seq, pos)
    return ops.cross_entropy(logits, flat[pos]), logits, flat[pos], pos


def vqa_batch(model, images, questions, targets, training=False, rng=None):
    feats = model.encode_images(images)
    seq = model.assemble_sequence(feats, questions)
    out = model.encoder_forward(seq, training=training, rng=rng)
    logits = model.vqa_logits(out, seq)
    targets = np.asarray(targets, dtype=np.intp)
    loss = None if (targets == IGNORE_INDEX).all() else ops.cross_entropy(logits, targets)
    return loss, logits, seq, out


def category_batch(model, questions, targets, training=False, rng=None):
    seq = model.assemble_sequence(None, questions)
    logits = model.category_logits(seq, training=training, rng=rng)
    return ops.cross_entropy(logits, np.asarray(targets, dtype=np.intp)), logits


# -- the generic loop ------------------------------------------------------------


@dataclass
class _Task:
    """What a training phase plugs into :func:`_fit`."""

    trainable: list
    prepare: callable  # (item, epoch, index) -> sample
    loss: callable  # (model, samples, rng) -> loss Tensor or None
    validate: callable  # model -> (val loss, val score); higher score is better
    select: str  # "loss" or "score"


def _fit(model, task, train_items, cfg, vocab, answers=(), meta=None, out_path=None):
    names = task.trainable
    params = {k: model.params[k] for k in names}
    state = OptimizerState.for_params(params, cfg.lr)
    lr = cfg.lr
    history, scores = [], []
    best = None
    best_key = None
    stale = 0
    n = len(train_items)
    for epoch in range(cfg.max_epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, batches = 0.0, 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size].tolist()
            samples = _map(lambda i: task.prepare(train_items[i], epoch, i), idx, cfg.workers)
            with Tape() as tape:
                loss = task.loss(model, samples, np.random.default_rng([cfg.seed, epoch, bi, 7]))
            if loss is None:
                continue
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            missing = [k for k, g in grads.items() if g is None]
            if missing:
                raise ContractError(f"missing gradient for parameter {missing[0]!r}")
            clip_grad_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, lr)
            for p in model.params.values():
                p.grad = None
            total += loss.item()
            batches += 1
        if batches == 0:
            raise DataError("no batch in the epoch produced a loss (nothing to learn from)")
        val_loss, score = task.validate(model)
        if val_loss is None:
            val_loss = total / batches
        history.append(val_loss)
        scores.append(score)
        key = -val_loss if task.select == "loss" or score is None else score
        improved = best_key is None or key > best_key
        log.info(
            "epoch %d train_loss %.5f val_loss %.5f val_score %.4f lr %.3g%s",
            epoch, total / batches, val_loss, score if score is not None else float("nan"), lr,
            " *" if improved else "",
        )
        if improved:
            best_key, stale = key, 0
            best = Checkpoint.from_model(
                model, vocab, epoch=epoch, best_val=val_loss,
                rng_state=_rng_state(np.random.default_rng([cfg.seed, epoch])),
                optimizer=OptimizerState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()},
                                         state.t, state.lr, state.beta1, state.beta2, state.eps),
                answers=tuple(answers), meta=dict(meta or {}),
            )
        else:
            stale += 1
        lr = plateau_schedule(history, cfg)
        if stale >= cfg.early_stop:
            log.info("early stop after %d epochs without improvement", stale)
            break
    best.meta["history"] = ",".join(f"{h:.6g}" for h in history)
    if scores and scores[0] is not None:
        best.meta["scores"] = ",".join(f"{s:.6g}" for s in scores)
    if out_path is not None:
        save_checkpoint(best, out_path)
    return best


# -- phases --------------------------------------------------------------------------


def _check_phase(cfg, phase):
    if cfg.phase != phase:
        raise ConfigError(f"{phase} needs a TrainConfig with phase={phase!r}, got {cfg.phase!r}")


def pretrain(corpus, cfg, model_cfg, vocab, val_corpus=None, out_path=None, init=None):
    """Masked-language-model pretraining on (image, caption) records; returns the best checkpoint."""
    _check_phase(cfg, "pretrain")
    if not corpus:
        raise DataError("pretraining corpus is empty")
    if model_cfg.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_cfg.vocab_size} does not match vocabulary size {len(vocab)}")
    policy = cfg.mask_policy
    tokenized = [(r.image_path, tokenize(r.caption, vocab, r.keywords)) for r in corpus]
    maskable = [x for x in tokenized if any(x[1].keyword_flags) or (policy.fallback_rate > 0 and any(i >= 5 for i in x[1].ids))]
    if not maskable:
        raise DataError("no caption in the corpus has a maskable token")
    if val_corpus is None:
        train_items, val_items = split_validation(maskable, cfg.val_fraction, cfg.seed)
    else:
        train_items = maskable
        val_items = [(r.image_path, tokenize(r.caption, vocab, r.keywords)) for r in val_corpus]
    model = init.model() if init is not None else MMBert(model_cfg, seed=cfg.seed)
    if init is not None and init.config.fingerprint() != model_cfg.fingerprint():
        raise FingerprintError("initial checkpoint was written for a different model config")
    model.cfg = replace(model.cfg, dropout=model_cfg.dropout)
    store = ImageStore(model_cfg.vision.input_size)

    def prepare(item, epoch, i, aug=cfg.augment):
        rng = np.random.default_rng([cfg.seed, epoch, i])
        img = store.prepare(item[0], aug, rng)
        m = mask_keywords(item[1], policy, rng)
        return img, m.input_ids, m.labels

    def loss(model, samples, rng):
        samples = [s for s in samples if any(lab != IGNORE_INDEX for lab in s[2][: model.cfg.max_text_len])]
        if not samples:
            return None
        images = np.stack([s[0] for s in samples])
        return mlm_batch(model, images, [s[1] for s in samples], [s[2] for s in samples], True, rng)[0]

    val_samples = None

    def validate(model):
        nonlocal val_samples
        if not val_items:
            return None, None
        if val_samples is None:
            val_samples = [prepare(it, VAL_STREAM, i, None) for i, it in enumerate(val_items)]
        tot, cnt, correct = 0.0, 0, 0
        with no_grad():
            for s in range(0, len(val_samples), cfg.batch_size):
                chunk = val_samples[s : s + cfg.batch_size]
                chunk = [c for c in chunk if any(lab != IGNORE_INDEX for lab in c[2][: model.cfg.max_text_len])]
                if not chunk:
                    continue
                l, logits, gold, _ = mlm_batch(model, np.stack([c[0] for c in chunk]), [c[1] for c in chunk], [c[2] for c in chunk])
                tot += l.item() * len(gold)
                cnt += len(gold)
                correct += int((np.argmax(logits.data, axis=1) == gold).sum())
        if cnt == 0:
            return None, None
        return tot / cnt, correct / cnt

    task = _Task(model.group("vision.", "emb.", "enc.", "mlm."), prepare, loss, validate, "loss")
    meta = {"phase": "pretrain", "seed": cfg.seed}
    return _fit(model, task, train_items, cfg, vocab, meta=meta, out_path=out_path)


def _vqa_items(records, vocab, space):
    return [(r.image_path, tokenize(r.question, vocab).ids, space.id(r.answer), r.category) for r in records]


def finetune(records, init, cfg, model_cfg, vocab, val_records=None, out_path=None):
    """Answer-classification finetuning; ``init`` is a pretrained checkpoint or ``None``.

    The ``non_pretrained`` variant ignores ``init``. The ``exclusive``
    variant trains on ``cfg.category`` records only.
    """
    _check_phase(cfg, "finetune")
    if cfg.variant == "exclusive":
        records = [r for r in records if r.category == cfg.category]
        if val_records is not None:
            val_records = [r for r in val_records if r.category == cfg.category]
        if not records:
            raise DataError(f"no training records in category {cfg.category!r}")
    if not records:
        raise DataError("finetuning dataset is empty")
    if model_cfg.vocab_size != len(vocab):
        raise ConfigError(f"model vocab_size {model_cfg.vocab_size} does not match vocabulary size {len(vocab)}")
    if val_records is None:
        records, val_records = split_validation(records, cfg.val_fraction, cfg.seed)
    space = build_answer_space(records)
    if cfg.variant == "non_pretrained" or init is None:
        model = MMBert(replace(model_cfg, num_answers=max(2, len(space))), seed=cfg.seed)
    else:
        if init.config.fingerprint() != model_cfg.fingerprint():
            raise FingerprintError(
                f"initial checkpoint config {init.config.fingerprint()} differs from {model_cfg.fingerprint()}"
            )
        model = init.model()
        model.cfg = replace(model.cfg, dropout=model_cfg.dropout)
        model.reset_head("vqa", max(2, len(space)), seed=cfg.seed)
    train_items = _vqa_items(records, vocab, space)
    val_items = _vqa_items(val_records, vocab, space)
    store = ImageStore(model_cfg.vision.input_size)

    def prepare(item, epoch, i, aug=cfg.augment):
        rng = np.random.default_rng([cfg.seed, epoch, i])
        return store.prepare(item[0], aug, rng), item[1], item[2]

    def loss(model, samples, rng):
        targets = [s[2] if s[2] >= 0 else IGNORE_INDEX for s in samples]
        return vqa_batch(model, np.stack([s[0] for s in samples]), [s[1] for s in samples], targets, True, rng)[0]

    val_samples = None

    def validate(model):
        nonlocal val_samples
        if not val_items:
            return None, None
        if val_samples is None:
            val_samples = [prepare(it, VAL_STREAM, i, None) for i, it in enumerate(val_items)]
        tot, cnt, correct = 0.0, 0, 0
        with no_grad():
            for s in range(0, len(val_samples), cfg.batch_size):
                chunk = val_samples[s : s + cfg.batch_size]
                targets = np.array([c[2] if c[2] >= 0 else IGNORE_INDEX for c in chunk])
                l, logits, _, _ = vqa_batch(model, np.stack([c[0] for c in chunk]), [c[1] for c in chunk], targets)
                known = targets != IGNORE_INDEX
                if l is not None:
                    tot += l.item() * known.sum()
                    cnt += known.sum()
                correct += int((np.argmax(logits.data, axis=1) == targets)[known].sum())
        return (tot / cnt if cnt else None), correct / len(val_samples)

    task = _Task(model.group("vision.", "emb.", "enc.", "vqa."), prepare, loss, validate, "score")
    meta = {"phase": "finetune", "variant": cfg.variant, "seed": cfg.seed}
    if cfg.variant == "exclusive":
        meta["category"] = cfg.category
    return _fit(model, task, train_items, cfg, vocab, answers=space.answers, meta=meta, out_path=out_path)


def train_router(records, cfg, model_cfg, vocab, init=None, val_records=None, out_path=None):
    """Train the text-only question-category classifier used for exclusive routing."""
    _check_phase(cfg, "finetune")
    if not records:
        raise DataError("router training set is empty")
    if val_records is None:
        records, val_records = split_validation(records, cfg.val_fraction, cfg.seed)
    index = {c: i for i, c in enumerate(CATEGORIES)}
    if init is not None:
        if init.config.fingerprint() != model_cfg.fingerprint():
            raise FingerprintError("router init checkpoint was written for a different model config")
        model = init.model()
    else:
        model = MMBert(model_cfg, seed=cfg.seed)
    model.cfg = replace(model.cfg, dropout=model_cfg.dropout)
    train_items = [(tokenize(r.question, vocab).ids, index[r.category]) for r in records]
    val_items = [(tokenize(r.question, vocab).ids, index[r.category]) for r in val_records]

    def loss(model, samples, rng):
        return category_batch(model, [s[0] for s in samples], [s[1] for s in samples], True, rng)[0]

    def validate(model):
        if not val_items:
            return None, None
        tot, correct = 0.0, 0
        with no_grad():
            for s in range(0, len(val_items), cfg.batch_size):
                chunk = val_items[s : s + cfg.batch_size]
                l, logits = category_batch(model, [c[0] for c in chunk], [c[1] for c in chunk])
                tot += l.item() * len(chunk)
                correct += int((np.argmax(logits.data, axis=1) == [c[1] for c in chunk]).sum())
        return tot / len(val_items), correct / len(val_items)

    trainable = model.group("emb.token", "emb.pos_txt", "emb.segment", "enc.", "cat.")
    task = _Task(trainable, lambda item, epoch, i: item, loss, validate, "score")
    return _fit(model, task, train_items, cfg, vocab, meta={"phase": "router", "seed": cfg.seed}, out_path=out_path)


__all__ = [
    "Checkpoint", "ImageStore", "OptimizerState", "TrainConfig", "adam_step", "category_batch",
    "checkpoint_bytes", "clip_grad_norm", "default_workers", "finetune", "load_checkpoint", "mlm_batch",
    "plateau_schedule", "pretrain", "save_checkpoint", "split_validation", "train_router", "vqa_batch",
]
