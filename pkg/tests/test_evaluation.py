import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mmvqa.data import VqaRecord
from mmvqa.errors import ContractError, DataError
from mmvqa.evaluation import (
    DirectPredictor,
    RoutedPredictor,
    accuracy,
    bleu,
    evaluate,
    export_predictions,
    masked_keyword_accuracy,
    oracle_router,
    rescore_predictions,
)
from mmvqa.model import CATEGORIES, MMBert
from mmvqa.tokenizer import build_vocab
from mmvqa.training import Checkpoint
from mmvqa.vision import write_ppm

from conftest import toy_config

PUNCT = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"


def oracle_tokens(s):
    s = " ".join(s.lower().split())
    while s and (s[0] in PUNCT or s[0].isspace()):
        s = s[1:]
    while s and (s[-1] in PUNCT or s[-1].isspace()):
        s = s[:-1]
    return s.split()


def brute_bleu(pred, gold):
    """Counts n-gram matches by greedy one-to-one pairing, then takes a plain product."""
    p, g = oracle_tokens(pred), oracle_tokens(gold)
    if not p:
        return 0.0
    big_n = min(4, len(g), len(p))
    prod = 1.0
    for n in range(1, big_n + 1):
        pg = [p[i : i + n] for i in range(len(p) - n + 1)]
        gg = [g[i : i + n] for i in range(len(g) - n + 1)]
        used = [False] * len(gg)
        hits = 0
        for gram in pg:
            for j, cand in enumerate(gg):
                if not used[j] and cand == gram:
                    used[j] = True
                    hits += 1
                    break
        prod *= hits / len(pg)
    bp = 1.0 if len(p) >= len(g) else math.exp(1 - len(g) / len(p))
    return bp * prod ** (1.0 / big_n)


WORDS = ["us", "-", "d", "doppler", "ultrasound", "mr", "t2", "axial", "the", "a"]


def random_pairs(n=50, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        lp = [1, 2, 3][i % 3] if i < 18 else int(rng.integers(1, 8))
        lg = [1, 2, 3][(i // 3) % 3] if i < 18 else int(rng.integers(1, 8))
        pool = WORDS[: int(rng.integers(2, len(WORDS) + 1))]
        pred = " ".join(rng.choice(pool, lp))
        gold = " ".join(rng.choice(pool, lg))
        while not oracle_tokens(gold):
            gold = " ".join(rng.choice(pool, lg))
        if i % 5 == 0:
            pred = pred.upper() + "  ."
        pairs.append((pred, gold))
    return pairs


class TestBleu:
    @pytest.mark.parametrize("pred,gold", random_pairs())
    def test_agrees_with_brute_force(self, pred, gold):
        assert abs(bleu(pred, gold) - brute_bleu(pred, gold)) <= 1e-9

    def test_randomized_pairs_are_not_all_trivial(self):
        scores = [brute_bleu(p, g) for p, g in random_pairs()]
        assert 0 < sum(s == 0 for s in scores) < 50 and any(0 < s < 1 for s in scores)

    def test_doppler_examples(self):
        gold = "us - d doppler ultrasound"
        # no shared bigram, so the 2-gram precision is zero
        assert bleu("us ultrasound", gold) == brute_bleu("us ultrasound", gold) == 0.0
        # all n-grams shared; only the brevity penalty exp(1 - 5/2) remains
        assert bleu("doppler ultrasound", gold) == pytest.approx(0.22313016014842982, abs=1e-15)

    def test_identity_exact(self):
        for s in ["yes", "MR-T2 Weighted", "us - d doppler ultrasound", "a a a a a a"]:
            assert bleu(s, s) == 1.0

    def test_disjoint_exact(self):
        assert bleu("left kidney", "right lung") == 0.0

    def test_empty_pred_and_gold(self):
        assert bleu("", "axial") == 0.0
        assert bleu("...", "axial") == 0.0
        with pytest.raises(ContractError):
            bleu("axial", " ! ")

    @given(st.lists(st.sampled_from(WORDS[:6]), min_size=1, max_size=6), st.lists(st.sampled_from(WORDS[:6]), min_size=1, max_size=6))
    def test_normalization_invariance_and_range(self, p, g):
        pred, gold = " ".join(p), " ".join(g)
        assume(oracle_tokens(gold))  # an all-punctuation gold is a contract error, tested above
        b = bleu(pred, gold)
        assert 0.0 <= b <= 1.0
        assert bleu(pred.upper().replace(" ", "   "), "  " + gold.title()) == b


class TestAccuracy:
    def test_examples(self):
        assert accuracy(["a", "b"], ["a", "b"]) == 1.0
        assert accuracy(["a", "b"], ["c", "d"]) == 0.0
        assert accuracy(["MR-T2 Weighted"], ["mr-t2 weighted"]) == 1.0

    def test_errors(self):
        with pytest.raises(ContractError):
            accuracy(["a"], ["a", "b"])
        with pytest.raises(ContractError):
            accuracy([], [])


def records(spec):
    return [VqaRecord(f"i{i}.ppm", c, f"q{i}?", a, f"t:{i}") for i, (c, a) in enumerate(spec)]


class FixedPredictor:
    def __init__(self, answers):
        self.answers = answers

    def __call__(self, recs):
        return [self.answers[r.id] for r in recs]


ANSWER_POOL = ["yes", "no", "axial", "red circle", "ct"]


class TestReport:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(CATEGORIES), st.sampled_from(ANSWER_POOL), st.sampled_from(ANSWER_POOL)), min_size=1, max_size=30))
    def test_invariants(self, rows):
        recs = records([(c, g) for c, g, _ in rows])
        rep = evaluate(recs, FixedPredictor({r.id: p for r, (_, _, p) in zip(recs, rows)}))
        assert rep.overall.count == sum(s.count for s in rep.categories.values()) == len(rows)
        assert rep.overall.accuracy == sum(g == p for _, g, p in rows) / len(rows)
        for s in [*rep.categories.values(), rep.overall]:
            if s.count:
                assert 0 <= s.accuracy <= 1 and 0 <= s.bleu <= 1
        for row in rep.rows:
            if row.correct:
                assert row.bleu == 1.0

    def test_single_correct(self):
        recs = records([("plane", "axial")])
        rep = evaluate(recs, FixedPredictor({"t:0": "Axial"}))
        assert rep.overall.accuracy == 1.0 and rep.overall.bleu == 1.0

    def test_table_shape(self):
        rep = evaluate(records([("plane", "axial"), ("yesno", "no")]), FixedPredictor({"t:0": "axial", "t:1": "yes"}))
        lines = rep.table("MMBERT General").splitlines()
        assert lines[0].split() == ["Modality", "Plane", "Organ", "Abnormality", "Yes/No", "Overall"]
        acc = lines[1].split()
        assert acc[-6:] == ["-", "1.000", "-", "-", "0.000", "0.500"]
        assert len({len(x) for x in lines}) == 1

    def test_export_and_rescore(self, tmp_path):
        recs = records([("plane", "axial"), ("organ", "red circle"), ("yesno", "no")])
        rep = evaluate(recs, FixedPredictor({"t:0": "axial", "t:1": "red square", "t:2": "no"}))
        path = export_predictions(rep, tmp_path / "p.tsv")
        lines = path.read_text().splitlines()
        assert lines[0] == "id\tcategory\tquestion\tgold\tprediction\tcorrect\tbleu"
        assert lines[1].endswith("\t1\t1.000000000")
        back = rescore_predictions(path)
        assert back.overall == rep.overall and back.categories == rep.categories

    def test_export_empty(self, tmp_path):
        path = export_predictions(evaluate([], FixedPredictor({})), tmp_path / "e.tsv")
        assert path.read_text() == "id\tcategory\tquestion\tgold\tprediction\tcorrect\tbleu\n"

    def test_rescore_rejects_headerless(self, tmp_path):
        (tmp_path / "x.tsv").write_text("a\tb\n")
        with pytest.raises(DataError):
            rescore_predictions(tmp_path / "x.tsv")


class TestRouting:
    def test_oracle_router_equals_direct(self):
        recs = records([("plane", "axial"), ("yesno", "no"), ("plane", "sagittal"), ("organ", "red")])
        experts = {
            "plane": FixedPredictor({"t:0": "axial", "t:2": "axial"}),
            "yesno": FixedPredictor({"t:1": "no"}),
            "organ": FixedPredictor({"t:3": "blue"}),
        }
        routed = evaluate(recs, RoutedPredictor(oracle_router, experts))
        for cat, expert in experts.items():
            direct = evaluate([r for r in recs if r.category == cat], expert)
            assert direct.categories[cat] == routed.categories[cat]

    def test_missing_expert(self):
        recs = records([("plane", "axial"), ("yesno", "no")])
        with pytest.raises(DataError, match="yesno"):
            evaluate(recs, RoutedPredictor(oracle_router, {"plane": FixedPredictor({"t:0": "axial"})}))


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("ev")
    rng = np.random.default_rng(0)
    for i in range(4):
        write_ppm(root / f"i{i}.ppm", rng.random((16, 16, 3)))
    vocab = build_vocab(["what plane is it", "is this a circle", "a red circle in the axial plane"], 40)
    model = MMBert(toy_config(vocab_size=len(vocab), num_answers=3))
    ck = Checkpoint.from_model(model, vocab, answers=("yes", "no", "axial"))
    recs = [VqaRecord(str(root / f"i{i}.ppm"), "plane", "what plane is it?", "axial", f"v:{i}") for i in range(4)]
    return ck, recs, root


class TestDirect:
    def test_deterministic_and_pure(self, tiny_ckpt):
        ck, recs, _ = tiny_ckpt
        pred = DirectPredictor(ck)
        before = {k: v.data.copy() for k, v in pred.model.params.items()}
        a, b = evaluate(recs, pred), evaluate(recs, pred)
        assert a == b
        assert all((pred.model.params[k].data == v).all() for k, v in before.items())

    def test_ties_break_to_lowest_id(self, tiny_ckpt):
        ck, recs, _ = tiny_ckpt
        params = dict(ck.params)
        params["vqa.out.w"] = np.zeros_like(params["vqa.out.w"])
        params["vqa.out.b"] = np.zeros_like(params["vqa.out.b"])
        assert DirectPredictor(replace(ck, params=params))(recs) == ["yes"] * 4

    def test_batching_does_not_change_answers(self, tiny_ckpt):
        ck, recs, _ = tiny_ckpt
        assert DirectPredictor(ck, batch_size=1)(recs) == DirectPredictor(ck, batch_size=3)(recs)

    def test_needs_answer_space(self, tiny_ckpt):
        with pytest.raises(DataError):
            DirectPredictor(replace(tiny_ckpt[0], answers=()))

    def test_masked_keyword_accuracy_runs(self, tiny_ckpt):
        from mmvqa.data import CaptionRecord

        ck, _, root = tiny_ckpt
        corpus = [CaptionRecord(str(root / "i0.ppm"), "a red circle in the axial plane", ("red", "circle", "axial"))]
        for mode in ("real", "noise"):
            assert 0.0 <= masked_keyword_accuracy(ck, corpus, images=mode) <= 1.0
        with pytest.raises(ContractError):
            masked_keyword_accuracy(ck, corpus, images="none")
