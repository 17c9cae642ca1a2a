import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvqa.errors import ConfigError, ContractError, DataError
from mmvqa.numerics.ops import IGNORE_INDEX
from mmvqa.tokenizer import (
    CLS_ID,
    MASK_ID,
    SEP_ID,
    SPECIALS,
    UNK_ID,
    MaskPolicy,
    Vocab,
    build_vocab,
    detokenize,
    mask_keywords,
    tokenize,
)

CAPTIONS = [
    "Axial CT of the chest shows a nodule.",
    "MRI brain: T2 weighted image with a lesion in the left lobe",
    "chest x-ray shows pneumonia",
    "a red circle in the axial plane",
]


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(CAPTIONS, target_size=120)


def piece_vocab(*extra):
    chars = sorted(set("unword"))
    return Vocab(list(SPECIALS) + chars + ["##" + c for c in chars] + list(extra))


class TestBuildVocab:
    def test_frequent_word_becomes_token(self):
        v = build_vocab(["aa aa aa"], target_size=10)
        assert "aa" in v

    def test_specials_first(self, vocab):
        assert vocab.tokens[:5] == list(SPECIALS)

    def test_target_below_alphabet(self):
        with pytest.raises(ConfigError):
            build_vocab(["abcdef"], target_size=6)

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_vocab(["   "], target_size=50)

    def test_deterministic_files(self, tmp_path):
        build_vocab(CAPTIONS, 80).save(tmp_path / "a.txt")
        build_vocab(CAPTIONS, 80).save(tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_every_char_covered(self, vocab):
        for cap in CAPTIONS:
            assert UNK_ID not in tokenize(cap, vocab).ids

    def test_file_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "v.txt")
        lines = (tmp_path / "v.txt").read_text(encoding="utf-8").splitlines()
        assert lines[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        assert Vocab.load(tmp_path / "v.txt") == vocab

    def test_bad_header(self, tmp_path):
        (tmp_path / "v.txt").write_text("[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n")
        with pytest.raises(DataError):
            Vocab.load(tmp_path / "v.txt")


class TestTokenize:
    def test_empty(self, vocab):
        assert tokenize("", vocab).ids == []

    def test_whole_word(self, vocab):
        assert "chest" in vocab
        seq = tokenize("Chest", vocab)
        assert [vocab.tokens[i] for i in seq.ids] == ["chest"]

    def test_greedy_longest_match(self):
        v = piece_vocab("un", "##word", "##wo")
        seq = tokenize("unword", v)
        assert [v.tokens[i] for i in seq.ids] == ["un", "##word"]

    def test_unmatchable_word(self):
        v = piece_vocab()
        assert tokenize("zzz", v).ids == [UNK_ID]

    def test_punctuation_split(self, vocab):
        toks = [vocab.tokens[i] for i in tokenize("nodule.", vocab).ids]
        assert toks[-1] == "."

    def test_offsets_are_ordered_bytes(self, vocab):
        text = "Axial CT of the chest"
        seq = tokenize(text, vocab)
        ends = [0] + [e for _, e in seq.offsets]
        starts = [s for s, _ in seq.offsets]
        assert all(s >= e for s, e in zip(starts, ends))
        assert all(s < e for s, e in seq.offsets)
        assert seq.offsets[0][0] == 0 and seq.offsets[-1][1] == len(text)

    def test_byte_offsets_with_non_ascii(self):
        v = build_vocab(["é a"], 20)
        seq = tokenize("é a", v)
        assert seq.offsets == [(0, 2), (3, 4)]

    def test_keyword_flags(self, vocab):
        seq = tokenize("chest x-ray shows pneumonia", vocab, keywords=["X-Ray", "pneumonia"])
        words = [vocab.tokens[i] for i in seq.ids]
        flagged = [w for w, f in zip(words, seq.keyword_flags) if f]
        assert "".join(t.lstrip("#") for t in flagged) == "x-raypneumonia"
        assert not seq.keyword_flags[0]

    def test_overlapping_keywords_unioned(self, vocab):
        seq = tokenize("left lobe", vocab, keywords=["left lo", "lobe"])
        assert all(seq.keyword_flags)
        assert len(set(seq.keyword_groups)) == 1

    @settings(max_examples=40, deadline=None)
    @given(st.text(max_size=40))
    def test_totality(self, text):
        v = build_vocab(["abc"], 20)
        seq = tokenize(text, v)
        words = text.lower().split()
        assert len(seq) >= len([w for w in words if any(not c.isspace() for c in w)])


class TestDetokenize:
    def test_fusion(self):
        v = piece_vocab("un", "##word")
        assert detokenize([v.index["un"], v.index["##word"]], v) == "unword"

    def test_specials_stripped(self, vocab):
        x = vocab.index["chest"]
        assert detokenize([CLS_ID, x, SEP_ID], vocab) == detokenize([x], vocab)

    def test_out_of_range(self, vocab):
        with pytest.raises(ContractError):
            detokenize([len(vocab)], vocab)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["chest", "axial", "shows", "lesion", "the", "red", "plane"]), min_size=1, max_size=8))
    def test_round_trip(self, words):
        v = build_vocab(CAPTIONS, 120)
        text = " ".join(words)
        assert detokenize(tokenize(text, v).ids, v) == text


class TestMasking:
    def test_keyword_pieces_masked(self, vocab):
        seq = tokenize("chest x-ray shows pneumonia", vocab, keywords=["x-ray", "pneumonia"])
        out = mask_keywords(seq, MaskPolicy(), np.random.default_rng(0))
        expected = [i for i, f in enumerate(seq.keyword_flags) if f]
        assert [i for i, t in enumerate(out.input_ids) if t == MASK_ID] == expected
        assert out.n_masked == len(expected)

    def test_no_keywords_zero_fallback(self, vocab):
        seq = tokenize("chest shows", vocab)
        out = mask_keywords(seq, MaskPolicy(fallback_rate=0.0), np.random.default_rng(0))
        assert out.n_masked == 0 and out.skippable

    def test_fallback_masks_some(self, vocab):
        seq = tokenize(" ".join(CAPTIONS), vocab)
        out = mask_keywords(seq, MaskPolicy(fallback_rate=0.5), np.random.default_rng(0))
        assert 0 < out.n_masked < len(seq)

    def test_deterministic(self, vocab):
        seq = tokenize(CAPTIONS[1], vocab, keywords=["lesion", "brain", "lobe"])
        pol = MaskPolicy(keyword_rate=0.5)
        a = mask_keywords(seq, pol, np.random.default_rng(7))
        b = mask_keywords(seq, pol, np.random.default_rng(7))
        assert a == b

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 1))
    def test_invariants(self, seed, rate):
        v = build_vocab(CAPTIONS, 120)
        seq = tokenize(CAPTIONS[1], v, keywords=["lesion", "weighted"])
        out = mask_keywords(seq, MaskPolicy(keyword_rate=rate, fallback_rate=rate), np.random.default_rng(seed))
        assert len(out.input_ids) == len(seq.ids)
        for orig, inp, lab in zip(seq.ids, out.input_ids, out.labels):
            assert (lab != IGNORE_INDEX) == (inp == MASK_ID)
            if lab != IGNORE_INDEX:
                assert lab == orig
            else:
                assert inp == orig

    def test_bad_rate(self):
        with pytest.raises(ConfigError):
            MaskPolicy(keyword_rate=1.5)
