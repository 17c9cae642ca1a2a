"""Caption-corpus and VQA file loading, answer spaces, and the synthetic benchmark.

Both interchange formats are UTF-8 TSV with ``#`` comment lines:

* caption corpus: ``image_path <TAB> caption <TAB> keyword;keyword;...``
* VQA records:    ``image_path <TAB> category <TAB> question <TAB> answer``

Relative image paths resolve against the TSV file's directory.
"""
from __future__ import annotations

import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import CATEGORIES
from .vision import write_ppm

log = logging.getLogger(__name__)

MAX_MALFORMED = 0.01
YES_NO = ("yes", "no")
CATEGORY_ALIASES = {"yes/no": "yesno", "yes_no": "yesno", "organ system": "organ", "organ_system": "organ"}

_WS = re.compile(r"\s+")
_STRIP = string.punctuation + string.whitespace


def normalize_answer(text):
    """Lowercase, collapse whitespace and strip surrounding punctuation."""
    return _WS.sub(" ", text.lower()).strip(_STRIP)


@dataclass(frozen=True)
class CaptionRecord:
    image_path: str
    caption: str
    keywords: tuple = ()

    @property
    def needs_fallback(self):
        """True when the record has no keywords, so masking falls back to random tokens."""
        return not self.keywords


@dataclass(frozen=True)
class VqaRecord:
    image_path: str
    category: str
    question: str
    answer: str
    id: str = ""  # "<file name>:<line>" when loaded from disk


class RecordList(list):
    """A list of records plus the problems found while loading them."""

    def __init__(self, records=(), malformed=(), warnings=0):
        super().__init__(records)
        self.malformed = list(malformed)
        self.warnings = warnings


def _lines(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from exc
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        yield no, line


def _resolve(base, p):
    q = Path(p)
    return str(q if q.is_absolute() else base / q)


def _finish(path, records, malformed, total, warnings=0):
    if total and len(malformed) / total > MAX_MALFORMED:
        sample = "; ".join(f"line {no}: {why}" for no, why in malformed[:5])
        raise DataError(f"{path}: {len(malformed)} of {total} lines malformed (limit 1%): {sample}")
    for no, why in malformed:
        log.warning("%s line %d skipped: %s", path, no, why)
    return RecordList(records, malformed, warnings)


def load_caption_corpus(path):
    base = Path(path).parent
    records, malformed, total, dropped = [], [], 0, 0
    for no, line in _lines(path):
        total += 1
        cols = line.split("\t")
        if len(cols) == 2:
            cols.append("")
        if len(cols) != 3:
            malformed.append((no, f"expected 3 tab-separated columns, got {len(cols)}"))
            continue
        img, caption, kw = (c.strip() for c in cols)
        if not img or not caption:
            malformed.append((no, "empty image path or caption"))
            continue
        keywords = []
        for k in (k.strip() for k in kw.split(";")):
            if not k:
                continue
            if k.lower() in caption.lower():
                keywords.append(k)
            else:
                dropped += 1
                log.warning("%s line %d: keyword %r not in caption, dropped", path, no, k)
        records.append(CaptionRecord(_resolve(base, img), caption, tuple(keywords)))
    return _finish(path, records, malformed, total, dropped)


def load_vqa_dataset(path, categories=CATEGORIES):
    """Load VQA records; any record whose answer is yes/no is put in the ``yesno`` category."""
    base = Path(path).parent
    known = set(categories)
    records, malformed, total = [], [], 0
    for no, line in _lines(path):
        total += 1
        cols = line.split("\t")
        if len(cols) != 4:
            malformed.append((no, f"expected 4 tab-separated columns, got {len(cols)}"))
            continue
        img, cat, question, answer = (c.strip() for c in cols)
        cat = CATEGORY_ALIASES.get(cat.lower(), cat.lower())
        if normalize_answer(answer) in YES_NO and "yesno" in known:
            cat = "yesno"
        if cat not in known:
            malformed.append((no, f"unknown category {cat!r}"))
            continue
        if not img or not question or not normalize_answer(answer):
            malformed.append((no, "empty image path, question or answer"))
            continue
        records.append(VqaRecord(_resolve(base, img), cat, question, answer, f"{Path(path).name}:{no}"))
    return _finish(path, records, malformed, total)


class AnswerSpace:
    """Closed set of normalized answers; ids are dense and ordered by frequency."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self):
        return len(self.answers)

    def __eq__(self, other):
        return isinstance(other, AnswerSpace) and self.answers == other.answers

    def id(self, answer):
        """Class id of ``answer`` after normalization, or -1 if outside the space."""
        return self.index.get(normalize_answer(answer), -1)

    def answer(self, i):
        return self.answers[i]


def build_answer_space(records, min_count=1):
    if not records:
        raise DataError("cannot build an answer space from zero records")
    counts = Counter(normalize_answer(r.answer) for r in records)
    kept = sorted((a for a, c in counts.items() if c >= min_count), key=lambda a: (-counts[a], a))
    if not kept:
        raise DataError(f"no answer occurs at least {min_count} times")
    return AnswerSpace(kept)


# -- synthetic benchmark ----------------------------------------------------

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}

QUESTIONS = {
    "modality": ("what shape is shown?", "what imaging modality was used?"),
    "plane": ("what plane is this image in?", "in which plane is the image taken?"),
    "organ": ("what color is the object?", "what organ system is shown?"),
}


@dataclass(frozen=True)
class SyntheticSpec:
    canvas: int = 64
    shapes: tuple = ("circle", "square", "cross")
    colors: tuple = ("red", "green", "blue")
    planes: tuple = ("axial", "sagittal")
    n_pretrain: int = 2000
    n_pretrain_test: int = 300
    n_train: int = 300
    n_val: int = 60
    n_test: int = 150
    object_size: tuple = (0.30, 0.45)
    seed: int = 0

    def __post_init__(self):
        for name in ("shapes", "colors", "planes"):
            if len(set(getattr(self, name))) < 2:
                raise ConfigError(f"synthetic spec needs at least 2 distinct {name}")
        unknown = set(self.shapes) - {"circle", "square", "cross"}
        unknown |= set(self.colors) - set(COLORS)
        unknown |= set(self.planes) - {"axial", "sagittal", "coronal"}
        if unknown:
            raise ConfigError(f"unsupported synthetic attribute values: {sorted(unknown)}")
        if self.canvas < 16:
            raise ConfigError("synthetic canvas must be at least 16 pixels")


def text_only_ceiling(spec):
    """Best masked-keyword accuracy achievable without the image.

    Attributes are sampled independently and uniformly, and every caption
    masks one colour, one shape and one plane keyword, so a text-only
    predictor can do no better than ``1/k`` on a slot with ``k`` values.
    """
    return (1 / len(spec.colors) + 1 / len(spec.shapes) + 1 / len(spec.planes)) / 3


@dataclass
class SyntheticImage:
    color: str
    shape: str
    plane: str
    box: tuple  # x0, y0, x1, y1 (exclusive)
    pixels: np.ndarray = field(repr=False)


def render_synthetic(color, shape, plane, size, cx, cy, canvas, rng):
    """Coloured shape over a plane-dependent striped background."""
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    img = np.full((canvas, canvas, 3), 0.12)
    period = max(4, canvas // 8)
    if plane == "axial":
        stripes = (yy // (period // 2)) % 2 == 0
    elif plane == "sagittal":
        stripes = (xx // (period // 2)) % 2 == 0
    else:
        stripes = ((xx + yy) // (period // 2)) % 2 == 0
    img[stripes] = 0.28
    img += rng.normal(0.0, 0.02, size=img.shape)
    r = size / 2
    dx, dy = np.abs(xx + 0.5 - cx), np.abs(yy + 0.5 - cy)
    if shape == "circle":
        mask = dx**2 + dy**2 <= r**2
    elif shape == "square":
        mask = (dx <= 0.8 * r) & (dy <= 0.8 * r)
    else:
        arm = r / 3
        mask = ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))
    img[mask] = COLORS[color]
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return np.clip(img, 0, 1).astype(np.float32), box


def _sample_image(spec, rng):
    color = spec.colors[rng.integers(len(spec.colors))]
    shape = spec.shapes[rng.integers(len(spec.shapes))]
    plane = spec.planes[rng.integers(len(spec.planes))]
    size = rng.uniform(*spec.object_size) * spec.canvas
    margin = size / 2 + 1
    cx = rng.uniform(margin, spec.canvas - margin)
    cy = rng.uniform(margin, spec.canvas - margin)
    pixels, box = render_synthetic(color, shape, plane, size, cx, cy, spec.canvas, rng)
    return SyntheticImage(color, shape, plane, box, pixels)


def caption_for(img):
    return f"a {img.color} {img.shape} in the {img.plane} plane", (img.color, img.shape, img.plane)


def questions_for(img, spec, rng):
    out = []
    for cat, answer in (("modality", img.shape), ("plane", img.plane), ("organ", img.color)):
        q = QUESTIONS[cat][rng.integers(len(QUESTIONS[cat]))]
        out.append((cat, q, answer))
    if rng.random() < 0.5:
        asked = img.shape
    else:
        others = [s for s in spec.shapes if s != img.shape]
        asked = others[rng.integers(len(others))]
    out.append(("yesno", f"is this a {asked}?", "yes" if asked == img.shape else "no"))
    return out


def gen_synthetic(spec, out_dir):
    """Write the synthetic benchmark under ``out_dir``; returns the written paths.

    Image ids are partitioned by split prefix (``pre``, ``pretest``, ``train``,
    ``val``, ``test``), so the splits never share an image.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    header = "# image_path\tcaption\tkeywords\n"
    vqa_header = "# image_path\tcategory\tquestion\tanswer\n"
    files = {
        "captions": out / "captions.tsv",
        "captions_test": out / "captions_test.tsv",
        "train": out / "vqa_train.tsv",
        "val": out / "vqa_val.tsv",
        "test": out / "vqa_test.tsv",
        "boxes": out / "boxes.tsv",
    }
    boxes = ["# image_path\tx0\ty0\tx1\ty1"]
    splits = (
        ("pre", spec.n_pretrain, "captions"),
        ("pretest", spec.n_pretrain_test, "captions_test"),
        ("train", spec.n_train, "train"),
        ("val", spec.n_val, "val"),
        ("test", spec.n_test, "test"),
    )
    for prefix, count, key in splits:
        rows = []
        for i in range(count):
            img = _sample_image(spec, rng)
            rel = f"images/{prefix}_{i:05d}.ppm"
            write_ppm(out / rel, img.pixels)
            boxes.append(f"{rel}\t" + "\t".join(str(v) for v in img.box))
            if key.startswith("captions"):
                caption, kws = caption_for(img)
                rows.append(f"{rel}\t{caption}\t{';'.join(kws)}")
            else:
                for cat, q, a in questions_for(img, spec, rng):
                    rows.append(f"{rel}\t{cat}\t{q}\t{a}")
        files[key].write_text((vqa_header if key in ("train", "val", "test") else header) + "\n".join(rows) + "\n", encoding="utf-8")
    files["boxes"].write_text("\n".join(boxes) + "\n", encoding="utf-8")
    return files


def load_boxes(path):
    base = Path(path).parent
    boxes = {}
    for no, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 5:
            raise DataError(f"{path} line {no}: expected 5 columns")
        boxes[_resolve(base, cols[0])] = tuple(int(c) for c in cols[1:])
    return boxes
