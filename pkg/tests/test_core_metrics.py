import math
from collections import Counter

import numpy as np
import pytest

from DietaMT.clients import StubProvider
from DietaMT.core_metrics import (
    MetricReport,
    bleu,
    chrf,
    compute_bleu,
    corpus_bleu,
    evaluate,
    load_report,
    metric_header,
    render_report,
    report_frame,
    save_report,
    score_external,
    tokenize_13a,
    tokenize_intl,
)
from DietaMT.support_functions import ClientError, ConfigError, ContractError


def make_fixture(n=50, seed=0):
    rng = np.random.default_rng(seed)
    words = "the a cat dog sat ran on under mat table quickly red".split()
    words += [".", ",", "3.14", "1,000", "(", ")", "!"]
    refs, hyps = [], []
    for _ in range(n):
        ref = list(rng.choice(words, size=int(rng.integers(3, 15))))
        hyp = [w for w in ref if rng.random() > 0.25]
        hyp += list(rng.choice(words, size=int(rng.integers(0, 3))))
        refs.append(" ".join(ref))
        hyps.append(" ".join(hyp))
    return hyps, refs


def brute_chrf(hyp, ref, order=6, beta=2):
    hyp, ref = "".join(hyp.split()), "".join(ref.split())
    precisions, recalls = [], []
    for n in range(1, order + 1):
        h = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
        r = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
        if sum(h.values()) and sum(r.values()):
            match = sum(min(c, r[g]) for g, c in h.items())
            precisions.append(match / sum(h.values()))
            recalls.append(match / sum(r.values()))
    p, r = np.mean(precisions), np.mean(recalls)
    return 0.0 if p + r == 0 else 100 * (1 + beta**2) * p * r / (beta**2 * p + r)


class TestTokenizers:
    def test_intl_keeps_numbers_together(self):
        text = "Costa 3.14 euro, circa 1,000 in totale."
        assert tokenize_intl(text) == "Costa 3.14 euro , circa 1,000 in totale ."
        assert tokenize_intl("«Ciao»!") == "« Ciao » !"
        assert tokenize_intl("5$ + 2€") == "5 $ + 2 €"

    def test_13a(self):
        assert tokenize_13a("Hello, world!") == "Hello , world !"
        assert tokenize_13a("1,000 and 3.5") == "1,000 and 3.5"


class TestBLEU:
    def test_identity_is_100(self):
        hyps, refs = make_fixture(10)
        assert bleu(refs, refs) == pytest.approx(100.0)

    def test_hand_counted_sentence(self):
        result = corpus_bleu(["the cat sat on the mat"], ["the cat is on the mat"])
        expected = (100 * 5 / 6 * 100 * 3 / 5 * 100 * 1 / 4 * 100 / (2 * 3)) ** 0.25
        assert result.score == pytest.approx(expected)
        assert result.score == pytest.approx(37.99, abs=0.01)
        assert result.bp == 1.0
        assert result.sys_len == result.ref_len == 6

    def test_no_smoothing_collapses_to_zero(self):
        hyp, ref = ["the cat sat on the mat"], ["the cat is on the mat"]
        result = corpus_bleu(hyp, ref, smooth_method="none")
        assert result.score == 0.0

    def test_brevity_penalty(self):
        reference = ["the cat sat on the mat"]
        result = corpus_bleu(["the cat"], reference, smooth_method="floor")
        assert result.bp == pytest.approx(math.exp(1 - 6 / 2))

    def test_empty_hypotheses_score_zero(self):
        assert bleu(["", ""], ["a b", "c d"]) == 0.0

    def test_add_k_and_floor(self):
        counts, totals = [4, 0, 0, 0], [4, 3, 2, 1]
        score, precisions, _ = compute_bleu(counts, totals, 4, 4, "floor", 0.1)
        floored = [100.0, 100 * 0.1 / 3, 100 * 0.1 / 2, 100 * 0.1]
        assert precisions == pytest.approx(floored)
        score, precisions, _ = compute_bleu(counts, totals, 4, 4, "add-k")
        assert precisions == pytest.approx([100.0, 25.0, 100 / 3, 50.0])
        with pytest.raises(ConfigError):
            compute_bleu([1] * 4, [1] * 4, 1, 1, "bogus")

    def test_signature(self):
        result = corpus_bleu(["a"], ["a"], tokenize="13a")
        expected = "nrefs:1|case:mixed|eff:no|tok:13a|smooth:exp|version:"
        assert result.signature.startswith(expected)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            bleu(["a", "b"], ["a"])
        with pytest.raises(ContractError):
            chrf([], [])


class TestChrF:
    def test_disjoint_and_identical(self):
        assert chrf(["aaa"], ["zzz"]) == 0.0
        assert chrf(["il gatto"], ["il gatto"]) == pytest.approx(100.0)

    def test_hand_counted_pair(self):
        assert chrf(["abcd"], ["abce"]) == pytest.approx(47.916666, abs=1e-4)
        assert chrf(["abcd"], ["abce"]) == pytest.approx(brute_chrf("abcd", "abce"))

    def test_whitespace_is_ignored(self):
        assert chrf(["il  gatto"], ["ilgatto"]) == pytest.approx(100.0)

    def test_matches_brute_force(self):
        hyps, refs = make_fixture(1, seed=4)
        assert chrf(hyps, refs) == pytest.approx(brute_chrf(hyps[0], refs[0]))


def test_agrees_with_sacrebleu():
    sacrebleu = pytest.importorskip("sacrebleu")
    hyps, refs = make_fixture(50)
    for tokenize in ("13a", "intl"):
        expected = sacrebleu.corpus_bleu(hyps, [refs], tokenize=tokenize).score
        assert bleu(hyps, refs, tokenize=tokenize) == pytest.approx(expected, abs=1e-4)
    expected = sacrebleu.corpus_bleu(hyps, [refs], tokenize="intl").score
    assert bleu(hyps, refs) == pytest.approx(expected, abs=1e-4)
    expected = sacrebleu.corpus_chrf(hyps, [refs]).score
    assert chrf(hyps, refs) == pytest.approx(expected, abs=1e-4)


class TestExternalScores:
    def test_constant_stub(self):
        stub = StubProvider(name="comet")
        result = score_external(["a", "b"], ["x", "y"], ["r", "s"], stub)
        assert result.name == "comet"
        assert result.mean == pytest.approx(0.5)
        assert result.error is None

    def test_mean_of_segments(self):
        stub = StubProvider(scorer_fn=lambda s, h, r: [0.2, 0.4, 0.9], name="bleurt")
        result = score_external(["a", "b", "c"], ["x", "y", "z"], ["r", "s", "t"], stub)
        assert result.segment_scores == [0.2, 0.4, 0.9]
        assert result.mean == pytest.approx(0.5)

    def test_reference_based_needs_references(self):
        with pytest.raises(ContractError):
            score_external(["a"], ["x"], None, StubProvider(name="metricx"))
        free = StubProvider(name="cometkiwi", reference_based=False)
        assert score_external(["a"], ["x"], None, free).mean == pytest.approx(0.5)

    def test_outage_is_absent_not_zero(self):
        def failing(sources, hypotheses, references):
            raise ClientError("503 Service Unavailable")

        stub = StubProvider(scorer_fn=failing, name="comet")
        result = score_external(["a"], ["x"], ["r"], stub, backoff=0)
        assert result.mean is None
        assert "503" in result.error
        assert stub.calls["score"] == 2

        report = MetricReport("GPT-4o")
        report.set("en-it", "comet", result.mean)
        text = render_report([report])
        assert "0.00" not in text


class TestReports:
    def test_single_system_table(self):
        segment = ["il gatto è sul tavolo"]
        report = evaluate("Tower-7B", "en-it", segment, segment)
        frame = report_frame([report])
        assert frame.shape == (1, 2)
        assert frame.loc["Tower-7B", ("en-it", "bleu")] == pytest.approx(100.0)
        tsv = render_report([report], fmt="tsv")
        header, row = tsv.splitlines()[:2]
        assert header == "system\tbleu(↑) en→it\tchrf(↑) en→it"
        assert row == "Tower-7B\t100.00\t100.00"

    def test_arrows_order_and_footnotes(self):
        a = MetricReport("DIETA-b5")
        a.set("en-it", "bleu", 30.0)
        a.set("it-en", "metricx", 3.5)
        b = MetricReport("Zephyr")
        b.set("en-it", "bleu", 25.0)
        c = MetricReport("DIETA+BT")
        c.set("en-it", "bleu", 31.0)
        text = render_report([a, b, c])
        lines = text.splitlines()
        assert "metricx(↓)" in lines[0]
        rows = [line.split()[0] for line in lines[1:4]]
        assert rows == ["Zephyr", "DIETA+BT", "DIETA-b5"]
        footnote = "The suffix -b5 indicates that beam search with 5 beams was used."
        assert footnote in text
        # Zephyr has no it-en MetricX score
        assert lines[1].split()[-1] == "-"

    def test_header_arrows(self):
        assert metric_header("bleu") == "bleu(↑)"
        assert metric_header("qe-metricx") == "qe-metricx(↓)"
        assert metric_header("custom") == "custom"

    def test_contract(self):
        report = MetricReport("x")
        with pytest.raises(ContractError):
            report.set("en-fr", "bleu", 10.0)
        with pytest.raises(ContractError):
            report.set("en-it", "bleu", 120.0)
        with pytest.raises(ContractError):
            render_report([])
        with pytest.raises(ContractError):
            render_report([MetricReport("empty")])
        report.set("en-it", "bleu", 1.0)
        with pytest.raises(ConfigError):
            render_report([report], fmt="html")

    def test_save_and_load(self, tmp_path):
        report = MetricReport("DIETA")
        report.set("en-it", "bleu", 33.3)
        report.set("it-en", "comet", None)
        report.notes["it-en:comet"] = "timeout"
        path = tmp_path / "board.tsv"
        save_report([report], path)
        (loaded,) = load_report(path)
        assert loaded.get("en-it", "bleu") == pytest.approx(33.3)
        assert loaded.get("it-en", "comet") is None
        assert loaded.notes == {"it-en:comet": "timeout"}
