"""WordPiece-style vocabulary, tokenization and keyword-only masking."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .numerics.ops import IGNORE_INDEX

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONT = "##"

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text):
    """Yield ``(word, start, end)`` for whitespace/punctuation-separated words (char offsets)."""
    for m in _WORD_RE.finditer(text):
        yield m.group(0), m.start(), m.end()


class Vocab:
    """Ordered subword vocabulary; ids 0-4 are the reserved specials."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:5]) != SPECIALS:
            raise DataError(f"vocab must start with {' '.join(SPECIALS)}")
        index = {}
        for i, tok in enumerate(tokens):
            if i >= 5 and (not tok or any(ch.isspace() for ch in tok)):
                raise DataError(f"vocab entry {i} is empty or contains whitespace: {tok!r}")
            if tok in index:
                raise DataError(f"duplicate vocab entry {tok!r} at line {i + 1}")
            index[tok] = i
        self.tokens = tokens
        self.index = index

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, tok):
        return self.index.get(tok, UNK_ID)

    def save(self, path):
        Path(path).write_bytes(("\n".join(self.tokens) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_bytes().decode("utf-8")
        except FileNotFoundError as exc:
            raise DataError(f"vocab file not found: {path}") from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            return cls(lines)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc


def _word_symbols(word):
    return [word[0]] + [CONT + ch for ch in word[1:]]


def build_vocab(corpus, target_size, min_freq=1):
    """Grow a subword vocabulary by greedily merging the most frequent adjacent pair.

    Every character seen in ``corpus`` (as word-initial and, where it occurs,
    as ``##`` continuation) is included, so tokenization of the corpus never
    needs ``[UNK]``. Merging stops at ``target_size`` entries, when no pair
    occurs at least ``min_freq`` times, or when every word is a single symbol.
    Ties between equally frequent pairs go to the lexicographically smaller
    pair, so the result depends only on the corpus contents.
    """
    counts = Counter()
    for line in corpus:
        for word, _, _ in split_words(line):
            counts[word.lower()] += 1
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")

    words = {w: _word_symbols(w) for w in sorted(counts)}
    alphabet = sorted({s for syms in words.values() for s in syms})
    if target_size < len(SPECIALS) + len(alphabet):
        raise ConfigError(
            f"target_size {target_size} is below specials + alphabet ({len(SPECIALS)} + {len(alphabet)})"
        )
    tokens = list(SPECIALS) + alphabet
    known = set(tokens)

    while len(tokens) < target_size:
        pairs = Counter()
        for w, syms in words.items():
            for a, b in zip(syms, syms[1:]):
                pairs[a, b] += counts[w]
        if not pairs:
            break
        best = max(pairs.values())
        if best < min_freq:
            break
        a, b = min(p for p, c in pairs.items() if c == best)
        merged = a + b[len(CONT):]
        for w, syms in words.items():
            if len(syms) < 2:
                continue
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocab(tokens)


@dataclass
class TokenSequence:
    ids: list
    offsets: list  # (start, end) UTF-8 byte spans into the source text
    keyword_flags: list
    keyword_groups: list = field(default_factory=list)  # keyword span index per token, -1 if none

    def __len__(self):
        return len(self.ids)

    @property
    def tokens(self):
        return self.ids


def _wordpiece(word, vocab):
    if word in vocab.index:
        return [(vocab.index[word], 0, len(word))]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end] if start == 0 else CONT + word[start:end]
            if sub in vocab.index:
                found = vocab.index[sub]
                break
            end -= 1
        if found is None:
            return [(UNK_ID, 0, len(word))]
        pieces.append((found, start, end))
        start = end
    return pieces


def keyword_spans(text, keywords):
    """Case-insensitive occurrences of each keyword, overlapping spans unioned."""
    spans = []
    low = text.lower()
    for kw in keywords:
        kw = kw.strip().lower()
        if not kw:
            continue
        start = low.find(kw)
        while start >= 0:
            spans.append((start, start + len(kw)))
            start = low.find(kw, start + 1)
    spans.sort()
    merged = []
    for lo, hi in spans:
        if merged and lo < merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [tuple(s) for s in merged]


def tokenize(text, vocab, keywords=()):
    """Lowercase, split on whitespace and punctuation, then greedy longest-match subwords."""
    spans = keyword_spans(text, keywords) if keywords else []
    ids, char_offsets, groups = [], [], []
    for word, ws, we in split_words(text):
        low = word.lower()
        same_len = len(low) == len(word)
        for tid, ps, pe in _wordpiece(low, vocab):
            lo, hi = (ws + ps, ws + pe) if same_len else (ws, we)
            ids.append(tid)
            char_offsets.append((lo, hi))
            group = -1
            for gi, (ks, ke) in enumerate(spans):
                if lo < ke and ks < hi:
                    group = gi
                    break
            groups.append(group)
    byte_pos = np.cumsum([0] + [len(ch.encode("utf-8")) for ch in text]).tolist()
    offsets = [(byte_pos[lo], byte_pos[hi]) for lo, hi in char_offsets]
    return TokenSequence(ids, offsets, [g >= 0 for g in groups], groups)


def detokenize(ids, vocab):
    """Join tokens with spaces, fusing ``##`` continuations and dropping specials."""
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= len(vocab):
            raise ContractError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i < len(SPECIALS):
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass(frozen=True)
class MaskPolicy:
    keyword_rate: float = 1.0
    fallback_rate: float = 0.15

    def __post_init__(self):
        for name in ("keyword_rate", "fallback_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class MaskingOutcome:
    input_ids: list
    labels: list
    n_masked: int

    @property
    def skippable(self):
        return self.n_masked == 0


def mask_keywords(seq, policy, rng):
    """Replace every piece of each selected keyword with ``[MASK]``.

    Keywords are selected independently with probability
    ``policy.keyword_rate``. A sequence without keyword tokens instead masks
    each token independently with ``policy.fallback_rate``.
    """
    ids = list(seq.ids)
    n = len(ids)
    chosen = np.zeros(n, dtype=bool)
    groups = np.asarray(seq.keyword_groups if seq.keyword_groups else [-1] * n, dtype=np.intp)
    flags = np.asarray(seq.keyword_flags, dtype=bool) if n else np.zeros(0, dtype=bool)
    if flags.any():
        group_ids = sorted(set(groups[flags].tolist()))
        picked = rng.random(len(group_ids)) < policy.keyword_rate
        for g, take in zip(group_ids, picked):
            if take:
                chosen |= groups == g
    elif n:
        chosen = rng.random(n) < policy.fallback_rate
        chosen &= np.asarray(ids) >= len(SPECIALS)
    labels = [ids[i] if chosen[i] else IGNORE_INDEX for i in range(n)]
    inputs = [MASK_ID if chosen[i] else ids[i] for i in range(n)]
    return MaskingOutcome(inputs, labels, int(chosen.sum()))
