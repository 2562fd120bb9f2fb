import numpy as np
import pandas as pd
import pytest

from DietaMT.clients import StubProvider
from DietaMT.core_data_pipeline import (
    Direction,
    PipelineStats,
    SentencePair,
    XorShift64Star,
    backtranslate,
    classify_reply,
    dedup,
    format_bidirectional,
    format_pair,
    format_samples,
    llm_filter,
    pair_key,
    permutation,
    read_aligned,
    read_lines,
    read_test_set,
    read_tsv,
    shuffle,
    shuffle_file,
    synthetic_number_corpus,
    write_pairs_tsv,
    write_rejection_log,
)
from DietaMT.support_functions import ClientError, InputError, PipelineError


def english_of(prompt):
    line = next(line for line in prompt.splitlines() if line.startswith("English: "))
    return line[len("English: ") :]


class TestDirection:
    def test_tags(self):
        assert Direction.EN_IT.source_tag == "ENG:"
        assert Direction.EN_IT.target_tag == "IT:"
        assert Direction.IT_EN.source_tag == "IT:"
        assert Direction.EN_IT.reverse is Direction.IT_EN

    def test_parse(self):
        assert Direction.parse("it-en") is Direction.IT_EN
        with pytest.raises(InputError):
            Direction.parse("fr-en")


class TestFormatting:
    def test_templates_are_byte_exact(self):
        pair = SentencePair("Hello, world!", "Ciao, mondo!")
        assert format_pair(pair, "en-it").text == "ENG: Hello, world! IT: Ciao, mondo!"
        reverse = format_pair(pair, Direction.IT_EN)
        assert reverse.text == "IT: Ciao, mondo! ENG: Hello, world!"

    @pytest.mark.parametrize("n_pairs", [0, 1, 1000])
    def test_bidirectional_doubles_the_corpus(self, n_pairs):
        pairs = [SentencePair(f"sentence {i}", f"frase {i}") for i in range(n_pairs)]
        stats = PipelineStats()
        samples = list(format_bidirectional(pairs, stats))
        assert len(samples) == 2 * n_pairs
        assert stats.output_samples == 2 * n_pairs
        if n_pairs:
            directions = [s.direction for s in samples[:2]]
            assert directions == [Direction.EN_IT, Direction.IT_EN]

    def test_synthetic_pairs_keep_their_direction(self):
        pairs = [
            SentencePair("a cat", "un gatto"),
            SentencePair("machine output", "testo umano", "synthetic", Direction.EN_IT),
        ]
        samples = list(format_samples(pairs))
        assert [s.text for s in samples] == [
            "ENG: a cat IT: un gatto",
            "IT: un gatto ENG: a cat",
            "ENG: machine output IT: testo umano",
        ]

    def test_pairs_reject_newlines_and_blank_sides(self):
        with pytest.raises(InputError):
            SentencePair("two\nlines", "due righe")
        with pytest.raises(InputError):
            SentencePair("   ", "vuoto")


class TestCorpusFiles:
    def test_misaligned_files(self, tmp_path):
        (tmp_path / "a.en").write_text("one\ntwo\nthree\n", encoding="utf-8")
        (tmp_path / "a.it").write_text("uno\ndue\n", encoding="utf-8")
        with pytest.raises(InputError, match="misaligned corpus"):
            read_aligned(tmp_path / "a.en", tmp_path / "a.it")

    def test_blank_sides_are_skipped_and_counted(self, tmp_path):
        (tmp_path / "b.en").write_text("one\n\nthree\r\n", encoding="utf-8")
        (tmp_path / "b.it").write_text("uno\ndue\ntre\n", encoding="utf-8")
        stats = PipelineStats()
        pairs = read_aligned(tmp_path / "b.en", tmp_path / "b.it", stats=stats)
        texts = [(p.english, p.italian) for p in pairs]
        assert texts == [("one", "uno"), ("three", "tre")]
        assert stats.skipped_empty == 1
        assert stats.input_pairs == 2

    def test_tsv_direction_tags(self, tmp_path):
        path = tmp_path / "bt.tsv"
        pairs = [
            SentencePair("mt text", "human text", "synthetic", Direction.EN_IT),
            SentencePair("plain", "semplice"),
        ]
        assert write_pairs_tsv(pairs, path) == 2
        assert read_lines(path)[0] == "mt text\thuman text\tsynthetic:en-it"
        assert read_tsv(path) == pairs

    def test_tsv_with_two_columns_and_test_set(self, tmp_path):
        path = tmp_path / "test.tsv"
        path.write_text('Good "morning"\tBuon "giorno"\nBye\tCiao\n', encoding="utf-8")
        sources, references = read_test_set(path, "it-en")
        assert sources == ['Buon "giorno"', "Ciao"]
        assert references == ['Good "morning"', "Bye"]


class TestDedup:
    def test_first_occurrence_wins(self):
        pairs = [
            SentencePair("Hello", "Ciao"),
            SentencePair("hello", "Ciao"),
            SentencePair("Hello", "Ciao"),
            SentencePair("Hello ", "Ciao"),
            SentencePair("Bye", "Ciao"),
            SentencePair("hello", "Ciao"),
        ]
        stats = PipelineStats()
        kept = list(dedup(pairs, stats))
        assert [p.english for p in kept] == ["Hello", "hello", "Hello ", "Bye"]
        assert stats.duplicates_removed == 2

    def test_key_ignores_provenance(self):
        opus = SentencePair("a", "b", "opus")
        assert pair_key(opus) == pair_key(SentencePair("a", "b", "other"))
        assert pair_key(SentencePair("ab", "c")) != pair_key(SentencePair("a", "bc"))

    def test_side_boundary_is_part_of_the_key(self):
        pairs = [SentencePair("a\x00", "b"), SentencePair("a", "\x00b")]
        assert pair_key(pairs[0]) != pair_key(pairs[1])
        assert len(list(dedup(pairs))) == 2

    def test_planted_duplicates(self):
        rng = np.random.default_rng(11)
        unique = [SentencePair(f"sentence {i}", f"frase {i}") for i in range(7000)]
        planted = [unique[i] for i in rng.integers(0, 7000, size=3000)]
        corpus = unique + planted
        corpus = [corpus[i] for i in rng.permutation(len(corpus))]
        stats = PipelineStats()
        kept = list(dedup(corpus, stats))
        assert len(kept) == 7000
        assert stats.duplicates_removed == 3000
        assert {p.english for p in kept} == {p.english for p in unique}


class TestJudgeFilter:
    @pytest.mark.parametrize(
        "reply, expected",
        [
            ("yes", "yes"),
            ("Yes.", "yes"),
            ("YES, they are", "yes"),
            ("No.", "no"),
            ("no", "no"),
            ("maybe", None),
            ("", None),
            ("yesterday", None),
        ],
    )
    def test_classify_reply(self, reply, expected):
        assert classify_reply(reply) == expected

    def test_decision_table(self):
        replies = {"keep": "Yes!", "drop": "No.", "unsure": "maybe"}
        judge = StubProvider(judge_fn=lambda prompt: replies[english_of(prompt)])
        pairs = [SentencePair(en, "it") for en in ("keep", "drop", "unsure", "keep")]
        rejections = []
        stats = PipelineStats()
        kept = list(llm_filter(pairs, judge, rejections, stats, workers=2, backoff=0))
        assert [p.english for p in kept] == ["keep", "keep"]
        assert stats.kept_pairs == 2
        assert stats.rejected_no == 1
        assert stats.rejected_malformed == 1
        reasons = [(r.position, r.reason) for r in rejections]
        assert reasons == [(1, "no"), (2, "malformed")]
        # a malformed reply is asked once more
        assert judge.calls["judge"] == 5

    def test_order_survives_many_workers(self):
        pairs = [SentencePair(f"s{i}", f"f{i}") for i in range(600)]

        def judge_fn(prompt):
            return "no" if english_of(prompt).endswith("7") else "yes"

        judge = StubProvider(judge_fn=judge_fn)
        kept = list(llm_filter(pairs, judge, workers=8, backoff=0))
        expected = [p.english for p in pairs if not p.english.endswith("7")]
        assert [p.english for p in kept] == expected

    def test_unreachable_judge_names_the_pair(self):
        def judge_fn(prompt):
            if english_of(prompt) == "broken":
                raise ClientError("connection refused")
            return "yes"

        judge = StubProvider(judge_fn=judge_fn)
        pairs = [SentencePair(en, "it") for en in ("fine", "broken", "fine too")]
        with pytest.raises(PipelineError, match="pair 1"):
            list(llm_filter(pairs, judge, workers=1, backoff=0))

    def test_transient_failure_is_retried(self):
        failures = []

        def judge_fn(prompt):
            if not failures:
                failures.append(prompt)
                raise ClientError("timeout")
            return "yes"

        judge = StubProvider(judge_fn=judge_fn)
        kept = list(llm_filter([SentencePair("a", "b")], judge, workers=1, backoff=0))
        assert len(kept) == 1
        assert judge.calls["judge"] == 2

    def test_rejection_log(self, tmp_path):
        judge = StubProvider(judge_fn=lambda prompt: "no")
        rejections = []
        list(llm_filter([SentencePair("a", "b")], judge, rejections, backoff=0))
        path = tmp_path / "rejected.tsv"
        write_rejection_log(rejections, path)
        frame = pd.read_csv(path, sep="\t")
        assert list(frame.columns) == [
            "position",
            "reason",
            "raw_reply",
            "english",
            "italian",
        ]
        assert frame.loc[0, "reason"] == "no"


class TestShuffle:
    def test_reproducible_permutation(self):
        first = permutation(100, seed=7)
        np.testing.assert_array_equal(first, permutation(100, seed=7))
        assert sorted(first.tolist()) == list(range(100))
        assert not np.array_equal(first, permutation(100, seed=8))
        assert not np.array_equal(first, np.arange(100))

    def test_degenerate_sizes(self):
        assert permutation(0, 1).tolist() == []
        assert permutation(1, 1).tolist() == [0]

    def test_generator_never_sticks_at_zero(self):
        rng = XorShift64Star(0)
        values = [rng.next() for _ in range(5)]
        assert all(0 <= v < 2**64 for v in values)
        assert len(set(values)) == 5

    def test_shuffle_file_matches_in_memory_shuffle(self, tmp_path):
        lines = [f"ENG: line {i} IT: riga {i}" for i in range(50)]
        src, dst = tmp_path / "in.txt", tmp_path / "out.txt"
        src.write_text("\n".join(lines), encoding="utf-8")
        assert shuffle_file(src, dst, seed=3) == 50
        assert read_lines(dst) == shuffle(lines, 3)


class TestBacktranslation:
    def test_italian_monolingual_gives_en_it_samples(self):
        mt = StubProvider(mt_fn=lambda text, direction: f"EN[{text}]")
        stats = PipelineStats()
        lines = ["Buongiorno", "", "Grazie"]
        pairs = list(backtranslate(lines, mt, "it-en", stats, workers=2, backoff=0))
        assert [(p.english, p.italian) for p in pairs] == [
            ("EN[Buongiorno]", "Buongiorno"),
            ("EN[Grazie]", "Grazie"),
        ]
        assert all(p.direction is Direction.EN_IT and p.is_synthetic for p in pairs)
        assert [s.text for s in format_samples(pairs)] == [
            "ENG: EN[Buongiorno] IT: Buongiorno",
            "ENG: EN[Grazie] IT: Grazie",
        ]
        assert stats.synthetic_pairs == 2
        assert mt.calls["translate"] == 2

    def test_failed_lines_are_skipped(self):
        def mt_fn(text, direction):
            if text == "bad":
                raise ClientError("503")
            return text.upper()

        mt = StubProvider(mt_fn=mt_fn)
        stats = PipelineStats()
        lines = ["good", "bad", "fine"]
        pairs = list(backtranslate(lines, mt, "en-it", stats, workers=1, backoff=0))
        texts = [(p.english, p.italian) for p in pairs]
        assert texts == [("good", "GOOD"), ("fine", "FINE")]
        assert all(p.direction is Direction.IT_EN for p in pairs)
        assert stats.mt_failures == 1

    @pytest.mark.parametrize("reply", ["BAD\rLINE", "BAD\tLINE", "BAD\nLINE", "  "])
    def test_unusable_translations_are_skipped(self, tmp_path, reply):
        def mt_fn(text, direction):
            return reply if text == "bad" else text.upper()

        stats = PipelineStats()
        pairs = backtranslate(
            ["good", "bad", "fine"],
            StubProvider(mt_fn=mt_fn),
            "en-it",
            stats,
            workers=1,
            backoff=0,
        )
        path = tmp_path / "synthetic.tsv"
        assert write_pairs_tsv(pairs, path) == 2
        assert stats.mt_failures == 1
        assert stats.synthetic_pairs == 2
        assert read_lines(path) == [
            "good\tGOOD\tsynthetic:it-en",
            "fine\tFINE\tsynthetic:it-en",
        ]

    def test_input_lines_with_tabs_are_skipped(self):
        mt = StubProvider(mt_fn=lambda text, direction: text.upper())
        lines = ["good", "tab\tinside", "cr\rinside", "fine"]
        pairs = list(backtranslate(lines, mt, "en-it", workers=1, backoff=0))
        assert [p.english for p in pairs] == ["good", "fine"]
        assert mt.calls["translate"] == 2


def test_synthetic_number_corpus():
    pairs = synthetic_number_corpus(200, seed=5, max_digits=3)
    assert pairs == synthetic_number_corpus(200, seed=5, max_digits=3)
    assert len({p.english for p in pairs}) == 200
    sample = next(p for p in pairs if p.english.split()[0] == "four")
    assert sample.italian.split()[0] == "quattro"
    assert len(sample.english.split()) == len(sample.italian.split())
    with pytest.raises(InputError):
        synthetic_number_corpus(20, max_digits=1)
