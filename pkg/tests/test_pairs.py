import io
import json

import numpy as np
import pytest

from twotower.corpus import CLS_ID, MASK_ID, NUM_SPECIALS, SEP_ID, TokenSeq, tokenize_corpus
from twotower.corpus import build_vocab, parse_corpus
from twotower.pairs import (
    DegenerateIctPair,
    MlmExample,
    NoInboundLink,
    NotEnoughPassages,
    NotEnoughSentences,
    PretrainPair,
    TaskMixture,
    _contains_subseq,
    gen_bfs,
    gen_ict,
    gen_mlm,
    gen_wlp,
    pair_stats,
    read_pairs,
    sample_mixture,
    write_pairs,
)
from twotower.util import subrng

Q_LEN, D_LEN = 16, 48


def _tokenized(micro_store, small_toy):
    _, _, vocab = small_toy
    tokenize_corpus(micro_store, vocab)
    return micro_store


@pytest.fixture()
def micro(micro_store, small_toy):
    return _tokenized(micro_store, small_toy)


class TestIct:
    def test_two_sentence_passage_forced_complement(self, micro):
        passage = micro.passage(0)  # "The stone shines. It sits in the river."
        title = micro.title_token_ids[1]
        pair = gen_ict(passage, title, subrng(0, "ict"), Q_LEN, D_LEN)
        i = pair.source[2]
        other = passage.sentences[1 - i].token_ids
        assert pair.query_content() == passage.sentences[i].token_ids[: Q_LEN - 1]
        assert pair.doc_body() == other[: len(pair.doc_body())]

    def test_single_sentence_passage_rejected(self, micro):
        single = parse_corpus([json.dumps({
            "id": 9, "title": "t",
            "sections": [{"heading": "", "passages": [{"text": "Only one sentence here."}]}],
        })])
        passage = single.passage(0)
        passage.sentences[0].token_ids = [7, 8, 9]
        with pytest.raises(NotEnoughSentences):
            gen_ict(passage, [], subrng(0), Q_LEN, D_LEN)

    def test_seeded_draw_deterministic_and_uniform(self, small_toy):
        store, _, _ = small_toy
        passage = next(p for p in store.passages.values() if len(p.sentences) == 5)
        title = store.title_token_ids[passage.article_id]
        first = gen_ict(passage, title, subrng(42, "u"), Q_LEN, D_LEN)
        again = gen_ict(passage, title, subrng(42, "u"), Q_LEN, D_LEN)
        assert first.query.ids == again.query.ids and first.doc.ids == again.doc.ids
        rng = subrng(42, "uniform")
        counts = np.zeros(5, dtype=int)
        for _ in range(10_000):
            counts[gen_ict(passage, title, rng, Q_LEN, D_LEN).source[2]] += 1
        # chi-square style 3-sigma band per bucket for p=1/5
        sigma = np.sqrt(10_000 * 0.2 * 0.8)
        assert np.all(np.abs(counts - 2000) <= 3 * sigma)

    def test_exclusion_detects_duplicate_sentences(self, micro):
        passage = micro.passage(0)
        ids = passage.sentences[0].token_ids
        clone = parse_corpus([json.dumps({
            "id": 9, "title": "t",
            "sections": [{"heading": "", "passages": [{"text": "Twin one. Twin two."}]}],
        })])
        twin = clone.passage(0)
        twin.sentences[0].token_ids = list(ids)
        twin.sentences[1].token_ids = list(ids)
        with pytest.raises(DegenerateIctPair):
            gen_ict(twin, [], subrng(1), Q_LEN, D_LEN)


class TestBfs:
    def test_forced_choice(self, micro):
        article = micro.article(1)  # lead passage A, body passage B
        pair = gen_bfs(article, subrng(0, "bfs"), Q_LEN, D_LEN, micro.title_token_ids[1])
        assert pair.source[1] == article.sections[1].passages[0].id
        assert micro.passage(pair.query_passage_id).section_index == 0

    def test_single_passage_article_rejected(self, micro):
        article = micro.article(2)
        with pytest.raises(NotEnoughPassages):
            gen_bfs(article, subrng(0), Q_LEN, D_LEN, [])

    def test_fixed_seed_identical_and_lead_query(self, small_toy):
        store, _, _ = small_toy
        article = store.article(3)
        a = gen_bfs(article, subrng(5, "b"), Q_LEN, D_LEN, store.title_token_ids[3])
        b = gen_bfs(article, subrng(5, "b"), Q_LEN, D_LEN, store.title_token_ids[3])
        assert a.query.ids == b.query.ids and a.doc.ids == b.doc.ids
        for seed in range(20):
            pair = gen_bfs(article, subrng(seed, "lead"), Q_LEN, D_LEN, [])
            assert store.passage(pair.query_passage_id).section_index == 0


class TestWlp:
    def test_forced_choice(self, micro):
        # Exactly passage 0 of article 1 links to article 2.
        pair = gen_wlp(micro.article(2), micro, subrng(0, "wlp"), Q_LEN, D_LEN)
        assert pair.source[1] == 0
        assert micro.passage(0).article_id == 1
        assert 2 in micro.passage(0).outgoing_links

    def test_no_inbound_links_rejected(self, micro):
        with pytest.raises(NoInboundLink):
            gen_wlp(micro.article(1), micro, subrng(0), Q_LEN, D_LEN)

    def test_two_candidates_near_even(self, small_toy):
        records = [
            {"id": 1, "title": "t one",
             "sections": [{"heading": "", "passages": [{"text": "Lead a. Lead b."}]}]},
            {"id": 2, "title": "t two",
             "sections": [{"heading": "", "passages": [{"text": "First link. More text.", "links": [1]}]}]},
            {"id": 3, "title": "t three",
             "sections": [{"heading": "", "passages": [{"text": "Second link. More text.", "links": [1]}]}]},
        ]
        store = parse_corpus([json.dumps(r) for r in records])
        _, _, vocab = small_toy
        tokenize_corpus(store, vocab)
        target = store.article(1)
        assert len(store.inbound[1]) == 2
        counts = {}
        rng = subrng(11, "wlp-even")
        for _ in range(10_000):
            pair = gen_wlp(target, store, rng, Q_LEN, D_LEN)
            counts[pair.source[1]] = counts.get(pair.source[1], 0) + 1
        sigma = np.sqrt(10_000 * 0.25)
        for pid in store.inbound[1]:
            assert abs(counts.get(pid, 0) - 5000) <= 3 * sigma


class TestMlm:
    def test_full_mask_limit_case(self):
        tokens = TokenSeq([CLS_ID, 7, 8, 9, SEP_ID, 10])
        example = gen_mlm(tokens, subrng(0), 0.999999, vocab_size=20, replacement=(1.0, 0.0, 0.0))
        assert example.input.ids == [CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID, MASK_ID]
        assert sorted(p for p, _ in example.labels) == [1, 2, 3, 5]

    def test_specials_never_selected(self):
        tokens = TokenSeq([CLS_ID, SEP_ID, CLS_ID])
        example = gen_mlm(tokens, subrng(0), 0.999999, vocab_size=20)
        assert example.labels == []
        assert example.input.ids == tokens.ids

    def test_selection_rate_binomial(self):
        rng = subrng(3, "mlm-rate")
        selected = 0
        total = 0
        for _ in range(100):
            tokens = TokenSeq([CLS_ID] + [9] * 100)
            example = gen_mlm(tokens, rng, 0.15, vocab_size=20)
            selected += len(example.labels)
            total += 100
        sigma = np.sqrt(total * 0.15 * 0.85)
        assert abs(selected - 0.15 * total) <= 3 * sigma

    def test_labels_record_originals(self):
        tokens = TokenSeq([CLS_ID, 7, 8, 9])
        example = gen_mlm(tokens, subrng(1), 0.999999, vocab_size=50)
        for pos, original in example.labels:
            assert original == tokens.ids[pos]

    def test_mask_rate_validated(self):
        with pytest.raises(ValueError):
            gen_mlm(TokenSeq([7]), subrng(0), 1.5, vocab_size=20)


class TestMixture:
    def test_degenerate_mixture(self, small_toy):
        store, _, _ = small_toy
        out = list(sample_mixture(store, TaskMixture({"ict": 1.0}), 10, subrng(0), Q_LEN, D_LEN))
        assert len(out) == 10
        assert all(p.task == "ict" for p in out)

    def test_uniform_counts_within_three_sigma(self, small_toy):
        store, _, _ = small_toy
        counts = {"ict": 0, "bfs": 0, "wlp": 0}
        for pair in sample_mixture(store, TaskMixture.uniform(), 30_000, subrng(1), Q_LEN, D_LEN):
            counts[pair.task] += 1
        sigma = np.sqrt(30_000 * (1 / 3) * (2 / 3))
        for task in counts:
            assert abs(counts[task] - 10_000) <= 3 * sigma

    def test_linkless_corpus_with_wlp_errors(self, small_toy):
        records = [
            {"id": 1, "title": "t",
             "sections": [{"heading": "", "passages": [{"text": "A b. C d."}, {"text": "E f. G h."}]}]},
            {"id": 2, "title": "u",
             "sections": [{"heading": "", "passages": [{"text": "I j. K l."}, {"text": "M n. O p."}]}]},
        ]
        store = parse_corpus([json.dumps(r) for r in records])
        _, _, vocab = small_toy
        tokenize_corpus(store, vocab)
        with pytest.raises(ValueError, match="wlp"):
            list(sample_mixture(store, TaskMixture.uniform(), 5, subrng(0), Q_LEN, D_LEN))

    def test_byte_identical_streams_for_same_seed(self, small_toy):
        store, _, _ = small_toy
        def dump(seed):
            buf = io.StringIO()
            write_pairs(buf, sample_mixture(store, TaskMixture.uniform(), 200, subrng(seed), Q_LEN, D_LEN))
            return buf.getvalue()
        assert dump(9) == dump(9)
        assert dump(9) != dump(10)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            TaskMixture({"ict": 0.5, "bfs": 0.2})
        with pytest.raises(ValueError):
            TaskMixture({"ict": -1.0, "bfs": 2.0})
        with pytest.raises(ValueError):
            TaskMixture({"nope": 1.0})


@pytest.fixture(scope="module")
def sampled(small_toy):
    store, _, _ = small_toy
    return store, list(sample_mixture(store, TaskMixture.uniform(), 600, subrng(2), Q_LEN, D_LEN))


class TestPairInvariants:

    def test_doc_format(self, sampled):
        _, pairs = sampled
        for pair in pairs:
            assert pair.doc.ids[0] == CLS_ID
            assert pair.doc.ids.count(SEP_ID) == 1

    def test_ict_exclusion(self, sampled):
        _, pairs = sampled
        for pair in pairs:
            if pair.task == "ict":
                assert not _contains_subseq(pair.doc_body(), pair.query_content())

    def test_bfs_query_from_lead_section(self, sampled):
        store, pairs = sampled
        for pair in pairs:
            if pair.task == "bfs":
                assert store.passage(pair.query_passage_id).section_index == 0

    def test_wlp_cross_page_with_verified_link(self, sampled):
        store, pairs = sampled
        for pair in pairs:
            if pair.task == "wlp":
                doc_passage = store.passage(pair.source[1])
                assert doc_passage.article_id != pair.source[0]
                assert pair.source[0] in doc_passage.outgoing_links

    def test_lengths_respect_limits(self, sampled):
        _, pairs = sampled
        for pair in pairs:
            assert len(pair.query) <= Q_LEN
            assert len(pair.doc) <= D_LEN


class TestPairStats:
    def test_empty_stream(self):
        stats = pair_stats([])
        for task in ("ict", "bfs", "wlp"):
            assert stats[task]["pairs"] == 0
            assert stats[task]["avg_query_tokens"] is None

    def test_mean_arithmetic(self):
        pairs = [
            PretrainPair(TokenSeq([1] * 4), TokenSeq([2] * 7), "ict", (0, 0, 0)),
            PretrainPair(TokenSeq([1] * 6), TokenSeq([2] * 9), "ict", (0, 0, 1)),
        ]
        stats = pair_stats(pairs)
        assert stats["ict"]["pairs"] == 2
        assert stats["ict"]["avg_query_tokens"] == 5.0
        assert stats["ict"]["avg_doc_tokens"] == 8.0

    def test_toy_corpus_ict_docs_longer_than_bfs_queries(self, small_toy):
        store, _, _ = small_toy
        stats = pair_stats(sample_mixture(store, TaskMixture.uniform(), 900, subrng(4), Q_LEN, D_LEN))
        assert stats["ict"]["avg_doc_tokens"] > stats["bfs"]["avg_query_tokens"]

    def test_pair_file_roundtrip(self, small_toy):
        store, _, _ = small_toy
        pairs = list(sample_mixture(store, TaskMixture.uniform(), 50, subrng(5), Q_LEN, D_LEN))
        buf = io.StringIO()
        write_pairs(buf, pairs)
        loaded = list(read_pairs(buf.getvalue().splitlines()))
        assert [(p.task, p.query.ids, p.doc.ids, tuple(p.source)) for p in pairs] == [
            (p.task, p.query.ids, p.doc.ids, tuple(p.source)) for p in loaded
        ]
