"""Multimodal BERT: sequence assembly, transformer encoder and task heads.

Sequence layout (image side segment 0, text side segment 1)::

    [CLS] img_0 .. img_{n-1} [SEP] tok_0 .. tok_{m-1} [SEP] [PAD] ...

Image tokens and text tokens are enumerated independently for position
embeddings; the closing [SEP] continues the text enumeration (position m).
[CLS] and the first [SEP] carry no position embedding.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .numerics import Tensor, ops
from .numerics.ops import IGNORE_INDEX
from .tokenizer import CLS_ID, PAD_ID, SEP_ID
from .vision import ImageFeatures, VisionConfig, encode_image, init_vision_params

LN_EPS = 1e-5
CATEGORIES = ("modality", "plane", "organ", "abnormality", "yesno")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_answers: int = 2
    num_categories: int = len(CATEGORIES)
    hidden: int = 132  # nearest multiple of the 3 default heads to 128
    layers: int = 4
    heads: int = 3
    ff: int = 0  # 0 means 4 * hidden
    max_text_len: int = 64
    dropout: float = 0.1
    vision: VisionConfig = field(default_factory=VisionConfig)

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("layers and heads must be at least 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.num_answers < 2:
            raise ConfigError("answer-class count must be at least 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size < 6:
            raise ConfigError("vocab_size too small")

    @property
    def ff_dim(self):
        return self.ff or 4 * self.hidden

    @property
    def n_image_tokens(self):
        return self.vision.n_tokens

    def items(self):
        """Flat ``(key, value)`` pairs in a fixed order (vision keys prefixed)."""
        out = []
        for f in fields(self):
            if f.name == "vision":
                for vf in fields(self.vision):
                    out.append((f"vision_{vf.name}", getattr(self.vision, vf.name)))
            else:
                out.append((f.name, getattr(self, f.name)))
        return out

    def fingerprint(self):
        """Digest of every setting that changes parameter shapes or semantics.

        Dropout and the answer count are excluded: dropout is a training
        setting, and the answer head is replaced when finetuning.
        """
        skip = {"dropout", "num_answers"}
        text = "\n".join(f"{k}={_fmt(v)}" for k, v in self.items() if k not in skip)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_items(cls, items):
        items = dict(items)
        vision = {}
        kwargs = {}
        for f in fields(VisionConfig):
            key = f"vision_{f.name}"
            if key in items:
                vision[f.name] = _parse_like(f.default, items.pop(key))
        for f in fields(cls):
            if f.name in items:
                default = 0 if f.name == "vocab_size" else f.default
                kwargs[f.name] = _parse_like(default, items.pop(f.name))
        if items:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(items))}")
        return cls(vision=VisionConfig(**vision), **kwargs)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(default, value):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in value.split(",") if x.strip())
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class MultimodalSequence:
    embedded: Tensor  # (B, T, D)
    segment_ids: np.ndarray
    position_ids: np.ndarray  # -1 where no position embedding applies
    pad_mask: np.ndarray  # True at real (unpadded) positions
    token_ids: np.ndarray  # -1 at image slots
    n_img: int
    text_start: int
    text_lengths: np.ndarray
    labels: np.ndarray | None = None

    @property
    def shape(self):
        return self.embedded.shape[:2]


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, T, D)
    attentions: list  # per layer, (B, H, T, T) arrays


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape)


class MMBert:
    """Parameters plus forward functions for the multimodal encoder and heads."""

    def __init__(self, cfg, seed=0, dtype=np.float32, params=None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init(np.random.default_rng(seed))
        self.params = params

    def _init(self, rng):
        cfg, d = self.cfg, self.cfg.hidden
        raw = {}
        raw["emb.token"] = _normal(rng, (cfg.vocab_size, d))
        raw["emb.pos_img"] = _normal(rng, (max(cfg.n_image_tokens, 1), d))
        raw["emb.pos_txt"] = _normal(rng, (cfg.max_text_len + 1, d))
        raw["emb.segment"] = _normal(rng, (2, d))
        for i in range(cfg.layers):
            p = f"enc.{i}."
            for name in ("q", "k", "v", "o"):
                raw[p + name + ".w"] = _normal(rng, (d, d))
                raw[p + name + ".b"] = np.zeros(d)
            raw[p + "ff1.w"] = _normal(rng, (d, cfg.ff_dim))
            raw[p + "ff1.b"] = np.zeros(cfg.ff_dim)
            raw[p + "ff2.w"] = _normal(rng, (cfg.ff_dim, d))
            raw[p + "ff2.b"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                raw[p + ln + ".g"] = np.ones(d)
                raw[p + ln + ".b"] = np.zeros(d)
        raw["enc.final_ln.g"] = np.ones(d)
        raw["enc.final_ln.b"] = np.zeros(d)
        raw.update(_head(rng, "mlm", d, cfg.vocab_size, layer_norm=True))
        raw.update(_head(rng, "vqa", d, cfg.num_answers))
        raw.update(_head(rng, "cat", d, cfg.num_categories))
        params = init_vision_params(cfg.vision, d, rng, dtype=self.dtype)
        params.update({k: Tensor(v.astype(self.dtype), requires_grad=True, name=k) for k, v in raw.items()})
        return params

    # -- parameter bookkeeping ------------------------------------------------

    def group(self, *prefixes):
        """Parameter names starting with any of ``prefixes``, in definition order."""
        return [k for k in self.params if k.startswith(prefixes)]

    @property
    def backbone(self):
        return self.group("vision.", "emb.", "enc.")

    def with_params(self, overrides):
        return MMBert(self.cfg, dtype=self.dtype, params={**self.params, **overrides})

    def astype(self, dtype):
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return MMBert(self.cfg, dtype=dtype, params=params)

    def reset_head(self, name, n_out, seed=0):
        """Fresh output head (e.g. the answer head for a new answer space)."""
        rng = np.random.default_rng(seed)
        for k, v in _head(rng, name, self.cfg.hidden, n_out).items():
            self.params[k] = Tensor(v.astype(self.dtype), requires_grad=True, name=k)
        if name == "vqa":
            self.cfg = replace(self.cfg, num_answers=n_out)

    # -- forward --------------------------------------------------------------

    def encode_images(self, images):
        return encode_image(images, self.params, self.cfg.vision)

    def assemble_sequence(self, feats, token_lists, label_lists=None, pad_to=None):
        """Build the embedded encoder input for a batch.

        ``feats`` is an :class:`ImageFeatures` batch, or ``None`` for the
        text-only layout ``[CLS] text [SEP]``. Text longer than
        ``max_text_len`` is truncated; image tokens never are.
        """
        cfg, p = self.cfg, self.params
        b = len(token_lists)
        if feats is not None:
            if feats.dim != cfg.hidden:
                raise ShapeError(f"image feature dim {feats.dim} does not match hidden size {cfg.hidden}")
            if feats.pooled.shape[0] != b:
                raise ShapeError(f"{feats.pooled.shape[0]} images for {b} token sequences")
            n_img = feats.n_tokens
        else:
            n_img = 0
        texts = [list(t)[: cfg.max_text_len] for t in token_lists]
        lengths = np.array([len(t) for t in texts], dtype=np.intp)
        width = int(lengths.max(initial=0)) + 1
        if pad_to is not None:
            width = max(width, pad_to - (n_img + 2 if n_img else 1))
        text_start = n_img + 2 if n_img else 1
        t_total = text_start + width

        txt_ids = np.full((b, width), PAD_ID, dtype=np.intp)
        txt_pos = np.zeros((b, width), dtype=np.intp)
        for i, toks in enumerate(texts):
            txt_ids[i, : len(toks)] = toks
            txt_ids[i, len(toks)] = SEP_ID
            txt_pos[i, : len(toks) + 1] = np.arange(len(toks) + 1)

        token_ids = np.full((b, t_total), -1, dtype=np.intp)
        token_ids[:, 0] = CLS_ID
        if n_img:
            token_ids[:, n_img + 1] = SEP_ID
        token_ids[:, text_start:] = txt_ids
        segment = np.zeros((b, t_total), dtype=np.intp)
        segment[:, text_start:] = 1
        position = np.full((b, t_total), -1, dtype=np.intp)
        position[:, text_start:] = txt_pos
        pad_mask = np.ones((b, t_total), dtype=bool)
        for i, n in enumerate(lengths):
            pad_mask[i, text_start + n + 1 :] = False
        if n_img:
            position[:, 1 : n_img + 1] = np.arange(n_img)

        d = cfg.hidden
        cls = ops.embedding(p["emb.token"], np.full((b, 1), CLS_ID))
        text = ops.embedding(p["emb.token"], txt_ids)
        txt_pos_emb = ops.embedding(p["emb.pos_txt"], txt_pos)
        if n_img:
            zeros = Tensor(np.zeros((b, 1, d), dtype=self.dtype))
            sep = ops.embedding(p["emb.token"], np.full((b, 1), SEP_ID))
            content = ops.concat([cls, feats.tokens(), sep, text], axis=1)
            img_pos = ops.embedding(p["emb.pos_img"], np.broadcast_to(np.arange(n_img), (b, n_img)))
            pos = ops.concat([zeros, img_pos, zeros, txt_pos_emb], axis=1)
        else:
            zeros = Tensor(np.zeros((b, 1, d), dtype=self.dtype))
            content = ops.concat([cls, text], axis=1)
            pos = ops.concat([zeros, txt_pos_emb], axis=1)
        embedded = ops.add(ops.add(content, pos), ops.embedding(p["emb.segment"], segment))

        labels = None
        if label_lists is not None:
            labels = np.full((b, t_total), IGNORE_INDEX, dtype=np.intp)
            for i, lab in enumerate(label_lists):
                lab = list(lab)[: cfg.max_text_len]
                labels[i, text_start : text_start + len(lab)] = lab
        return MultimodalSequence(embedded, segment, position, pad_mask, token_ids, n_img, text_start, lengths, labels)

    def encoder_forward(self, seq, training=False, rng=None):
        cfg, p = self.cfg, self.params
        x = seq.embedded
        if training and cfg.dropout > 0:
            x = ops.dropout(x, cfg.dropout, rng)
        b, t, d = x.shape
        h, dk = cfg.heads, d // cfg.heads
        key_mask = seq.pad_mask[:, None, None, :]
        attentions = []
        for i in range(cfg.layers):
            pre = f"enc.{i}."
            try:
                y = ops.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], LN_EPS)

                def split(name):
                    z = ops.linear(y, p[pre + name + ".w"], p[pre + name + ".b"])
                    return ops.transpose(ops.reshape(z, (b, t, h, dk)), (0, 2, 1, 3))

                q, k, v = split("q"), split("k"), split("v")
                scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
                attn = ops.softmax(scores, axis=-1, mask=key_mask)
                ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
                z = ops.linear(ctx, p[pre + "o.w"], p[pre + "o.b"])
                if training and cfg.dropout > 0:
                    z = ops.dropout(z, cfg.dropout, rng)
                x = ops.add(x, z)
                y = ops.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], LN_EPS)
                z = ops.linear(ops.gelu(ops.linear(y, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
                if training and cfg.dropout > 0:
                    z = ops.dropout(z, cfg.dropout, rng)
                x = ops.add(x, z)
            except NumericError as exc:
                raise NumericError(f"encoder layer {i}: {exc}") from exc
            attentions.append(attn.data)
        x = ops.layer_norm(x, p["enc.final_ln.g"], p["enc.final_ln.b"], LN_EPS)
        return EncoderOutput(x, attentions)

    def mlm_logits(self, out, seq, positions):
        """Vocabulary logits at flat indices ``positions`` of the (B*T) grid."""
        positions = np.asarray(positions, dtype=np.intp).reshape(-1)
        b, t = seq.shape
        cols = positions % t
        if positions.size and (positions.min() < 0 or positions.max() >= b * t):
            raise ContractError("mlm position outside the batch")
        if (cols < seq.text_start).any():
            raise ContractError("mlm positions must index the text region, not [CLS]/image tokens")
        flat = ops.reshape(out.hidden, (b * t, self.cfg.hidden))
        h = ops.take_rows(flat, positions)
        return _apply_head(self.params, "mlm", h, layer_norm=True)

    def vqa_logits(self, out, seq):
        """Answer logits from the mean of all unpadded last-layer states."""
        return _apply_head(self.params, "vqa", ops.masked_mean(out.hidden, seq.pad_mask))

    def category_logits(self, seq, training=False, rng=None):
        """Question-category logits from a text-only sequence."""
        if seq.n_img:
            raise ContractError("category_logits takes a text-only sequence (no image tokens)")
        out = self.encoder_forward(seq, training, rng)
        return _apply_head(self.params, "cat", ops.masked_mean(out.hidden, seq.pad_mask))


def _head(rng, name, d, n_out, layer_norm=False):
    raw = {
        f"{name}.dense.w": _normal(rng, (d, d)),
        f"{name}.dense.b": np.zeros(d),
        f"{name}.out.w": _normal(rng, (d, n_out)),
        f"{name}.out.b": np.zeros(n_out),
    }
    if layer_norm:
        raw[f"{name}.ln.g"] = np.ones(d)
        raw[f"{name}.ln.b"] = np.zeros(d)
    return raw


def _apply_head(p, name, h, layer_norm=False):
    h = ops.gelu(ops.linear(h, p[f"{name}.dense.w"], p[f"{name}.dense.b"]))
    if layer_norm:
        h = ops.layer_norm(h, p[f"{name}.ln.g"], p[f"{name}.ln.b"], LN_EPS)
    return ops.linear(h, p[f"{name}.out.w"], p[f"{name}.out.b"])
