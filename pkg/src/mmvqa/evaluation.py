"""Accuracy, uniform-weight BLEU, category-wise reports and prediction export."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import VqaRecord, normalize_answer
from .errors import ContractError, DataError
from .model import CATEGORIES
from .numerics import no_grad
from .numerics.ops import IGNORE_INDEX
from .tokenizer import MaskPolicy, mask_keywords, tokenize
from .training import ImageStore, category_batch, mlm_batch, vqa_batch

CATEGORY_TITLES = {"modality": "Modality", "plane": "Plane", "organ": "Organ", "abnormality": "Abnormality", "yesno": "Yes/No"}
HEADER = ("id", "category", "question", "gold", "prediction", "correct", "bleu")


def accuracy(preds, golds):
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions for {len(golds)} gold answers")
    if not preds:
        raise ContractError("accuracy of an empty list is undefined")
    return sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds)) / len(preds)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred, gold):
    """Cumulative BLEU with uniform weights over n = 1..min(4, |gold|, |pred|).

    Clipped n-gram precisions, no smoothing, brevity penalty when the
    prediction is shorter than the gold answer. Both strings are normalized
    first, so casing and spacing never matter.
    """
    g = normalize_answer(gold).split()
    if not g:
        raise ContractError(f"gold answer {gold!r} is empty after normalization")
    p = normalize_answer(pred).split()
    if not p:
        return 0.0
    n_max = min(4, len(g), len(p))
    log_sum = 0.0
    for n in range(1, n_max + 1):
        pc, gc = _ngrams(p, n), _ngrams(g, n)
        hits = sum(min(c, gc[k]) for k, c in pc.items())
        if hits == 0:
            return 0.0
        log_sum += math.log(hits / (len(p) - n + 1))
    bp = 1.0 if len(p) >= len(g) else math.exp(1.0 - len(g) / len(p))
    return bp * math.exp(log_sum / n_max)


@dataclass(frozen=True)
class Score:
    accuracy: float | None
    bleu: float | None
    count: int


@dataclass(frozen=True)
class Row:
    id: str
    category: str
    question: str
    gold: str
    prediction: str
    correct: bool
    bleu: float


@dataclass
class EvalReport:
    rows: list
    categories: dict = field(default_factory=dict)
    overall: Score = Score(None, None, 0)

    @classmethod
    def from_rows(cls, rows, categories=CATEGORIES):
        rows = list(rows)
        per = {}
        for c in list(categories) + sorted({r.category for r in rows} - set(categories)):
            sel = [r for r in rows if r.category == c]
            per[c] = _score(sel)
        return cls(rows, per, _score(rows))

    def table(self, label="model"):
        """Aligned text table, one column per category plus the overall column."""
        cats = list(self.categories)
        titles = [CATEGORY_TITLES.get(c, c) for c in cats] + ["Overall"]
        scores = [self.categories[c] for c in cats] + [self.overall]
        width = max(11, *(len(t) for t in titles))
        lead = max(len(label) + 9, 16)

        def cell(v):
            return "-".rjust(width) if v is None else f"{v:{width}.3f}"

        lines = [" " * lead + "".join(t.rjust(width + 1) for t in titles)]
        lines.append(f"{label} accuracy".ljust(lead) + "".join(" " + cell(s.accuracy) for s in scores))
        lines.append(f"{label} bleu".ljust(lead) + "".join(" " + cell(s.bleu) for s in scores))
        lines.append("count".ljust(lead) + "".join(" " + str(s.count).rjust(width) for s in scores))
        return "\n".join(lines)


def _score(rows):
    if not rows:
        return Score(None, None, 0)
    return Score(sum(r.correct for r in rows) / len(rows), float(np.mean([r.bleu for r in rows])), len(rows))


def score_rows(records, predictions):
    rows = []
    for i, (r, p) in enumerate(zip(records, predictions)):
        ok = normalize_answer(p) == normalize_answer(r.answer)
        rows.append(Row(r.id or str(i), r.category, r.question, r.answer, p, ok, bleu(p, r.answer)))
    return rows


# -- predictors --------------------------------------------------------------------


class DirectPredictor:
    """Answers questions with one finetuned checkpoint."""

    def __init__(self, ckpt, batch_size=32):
        if not ckpt.answers:
            raise DataError("checkpoint has no answer space (is it a pretraining checkpoint?)")
        self.ckpt = ckpt
        self.model = ckpt.model()
        self.space = ckpt.answer_space
        self.store = ImageStore(ckpt.config.vision.input_size)
        self.batch_size = batch_size

    def logits(self, records):
        out = []
        with no_grad():
            for s in range(0, len(records), self.batch_size):
                chunk = records[s : s + self.batch_size]
                images = np.stack([self.store.prepare(r.image_path) for r in chunk])
                questions = [tokenize(r.question, self.ckpt.vocab).ids for r in chunk]
                targets = np.full(len(chunk), IGNORE_INDEX)
                out.append(vqa_batch(self.model, images, questions, targets)[1].data)
        return np.concatenate(out) if out else np.zeros((0, len(self.space)))

    def __call__(self, records):
        # np.argmax picks the lowest id among tied maxima
        return [self.space.answer(int(i)) for i in np.argmax(self.logits(records), axis=1)]


class CategoryRouter:
    """Predicts the question category with the text-only router checkpoint."""

    def __init__(self, ckpt, batch_size=64):
        self.ckpt = ckpt
        self.model = ckpt.model()
        self.batch_size = batch_size

    def __call__(self, records):
        out = []
        with no_grad():
            for s in range(0, len(records), self.batch_size):
                chunk = records[s : s + self.batch_size]
                qs = [tokenize(r.question, self.ckpt.vocab).ids for r in chunk]
                _, logits = category_batch(self.model, qs, np.zeros(len(chunk), dtype=np.intp))
                out += [CATEGORIES[int(i)] for i in np.argmax(logits.data, axis=1)]
        return out


def oracle_router(records):
    """Routes every record to its gold category."""
    return [r.category for r in records]


class RoutedPredictor:
    """Dispatches each question to the expert of its predicted category.

    Records routed to the same category are answered together, in dataset
    order, exactly as a direct evaluation of that category's subset would be.
    """

    def __init__(self, router, experts):
        self.router = router
        self.experts = dict(experts)

    def __call__(self, records):
        routes = self.router(records)
        preds = [None] * len(records)
        for cat in dict.fromkeys(routes):
            idx = [i for i, c in enumerate(routes) if c == cat]
            if cat not in self.experts:
                raise DataError(f"router chose category {cat!r} but no checkpoint for it was given")
            for i, p in zip(idx, self.experts[cat]([records[i] for i in idx])):
                preds[i] = p
        return preds


def evaluate(records, predictor, categories=CATEGORIES):
    """Score ``predictor`` (records -> answer strings) on ``records``."""
    records = list(records)
    preds = predictor(records) if records else []
    return EvalReport.from_rows(score_rows(records, preds), categories)


# -- export -----------------------------------------------------------------------


def export_predictions(report, path):
    path = Path(path)
    lines = ["\t".join(HEADER)]
    for r in report.rows:
        fields = (r.id, r.category, r.question, r.gold, r.prediction, str(int(r.correct)), f"{r.bleu:.9f}")
        for f in fields:
            if "\t" in f or "\n" in f:
                raise ContractError(f"field {f!r} of row {r.id} contains a tab or newline")
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def rescore_predictions(path, categories=CATEGORIES):
    """Rebuild a report from an exported predictions file by re-scoring gold against prediction."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or tuple(text[0].split("\t")) != HEADER:
        raise DataError(f"{path}: missing predictions header")
    records, preds = [], []
    for no, line in enumerate(text[1:], start=2):
        cols = line.split("\t")
        if len(cols) != len(HEADER):
            raise DataError(f"{path} line {no}: expected {len(HEADER)} columns")
        records.append(VqaRecord("", cols[1], cols[2], cols[3], cols[0]))
        preds.append(cols[4])
    return EvalReport.from_rows(score_rows(records, preds), categories)


# -- masked-keyword accuracy ------------------------------------------------------------


def masked_keyword_accuracy(ckpt, corpus, images="real", seed=0, batch_size=32):
    """Fraction of keywords whose every piece is recovered when all keywords are masked.

    ``images="noise"`` replaces each image with seeded uniform noise, which
    measures what the caption text alone supports.
    """
    if images not in ("real", "noise"):
        raise ContractError(f"images must be 'real' or 'noise', got {images!r}")
    model, vocab = ckpt.model(), ckpt.vocab
    size = ckpt.config.vision.input_size
    store = ImageStore(size)
    policy = MaskPolicy(keyword_rate=1.0, fallback_rate=0.0)
    noise = np.random.default_rng(seed)
    samples = []
    for r in corpus:
        seq = tokenize(r.caption, vocab, r.keywords)
        if not any(seq.keyword_flags):
            continue
        m = mask_keywords(seq, policy, np.random.default_rng(0))
        groups = np.asarray(seq.keyword_groups)
        img = store.prepare(r.image_path) if images == "real" else noise.random((size, size, 3)).astype(np.float32)
        samples.append((img, m.input_ids, m.labels, groups))
    if not samples:
        raise DataError("no caption with keywords to evaluate")
    hits = total = 0
    limit = model.cfg.max_text_len
    with no_grad():
        for s in range(0, len(samples), batch_size):
            chunk = samples[s : s + batch_size]
            _, logits, gold, _ = mlm_batch(model, np.stack([c[0] for c in chunk]), [c[1] for c in chunk], [c[2] for c in chunk])
            ok = iter(np.argmax(logits.data, axis=1) == gold)
            # flat positions are row-major, so predictions arrive sample by sample in token order
            for _, _, labels, groups in chunk:
                per = {}
                for j, lab in enumerate(labels[:limit]):
                    if lab != IGNORE_INDEX:
                        per.setdefault(groups[j], []).append(next(ok))
                hits += sum(all(v) for v in per.values())
                total += len(per)
    return hits / total
