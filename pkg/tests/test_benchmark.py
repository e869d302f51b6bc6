import io
import json

import numpy as np
import pytest

from twotower.benchmark import (
    ExperimentConfig,
    QaEntry,
    augment_open_domain,
    build_reqa,
    evaluate,
    make_split,
    parse_task_spec,
    read_qa_entries,
    run_experiment,
    sample_distractors,
    summarize_cells,
    write_qa_entries,
)
from twotower.corpus import CLS_ID, SEP_ID, parse_corpus, tokenize_corpus
from twotower.retrieval import RankedList
from twotower.synth import SynthConfig, build_toy
from twotower.util import subrng

Q_LEN, D_LEN = 16, 48


@pytest.fixture()
def three_sentence_setup(small_toy):
    _, _, vocab = small_toy
    records = [{
        "id": 1, "title": "t",
        "sections": [{"heading": "", "passages": [
            {"text": "Alpha beta gamma. Delta epsilon zeta. Eta theta iota."}
        ]}],
    }]
    store = parse_corpus([json.dumps(r) for r in records])
    tokenize_corpus(store, vocab)
    return store, vocab


class TestBuildReqa:
    def test_counting_rule(self, three_sentence_setup):
        store, vocab = three_sentence_setup
        entries = [QaEntry("what is delta ?", "Delta epsilon", 0)]
        examples, candidates, dropped = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        assert len(candidates) == 3
        assert len(examples) == 1
        assert dropped == 0
        assert examples[0].gold_id == candidates[1].id

    def test_answer_spanning_sentence_boundary_dropped(self, three_sentence_setup):
        store, vocab = three_sentence_setup
        entries = [QaEntry("q ?", "gamma. Delta", 0)]
        examples, _, dropped = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        assert examples == []
        assert dropped == 1

    def test_first_matching_sentence_is_gold(self, three_sentence_setup):
        store, vocab = three_sentence_setup
        entries = [QaEntry("q ?", "ta", 0)]  # substring of "beta" and "Delta", ...
        examples, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        assert examples[0].gold_id == candidates[0].id

    def test_unresolvable_passage_id(self, three_sentence_setup):
        store, vocab = three_sentence_setup
        with pytest.raises(ValueError, match="unknown passage id"):
            build_reqa([QaEntry("q", "a", 99)], store, vocab, Q_LEN, D_LEN)

    def test_candidate_format_and_dedup(self, small_toy):
        store, entries, vocab = small_toy
        examples, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        assert len(candidates) >= len(examples) or True  # shapes checked below
        seen = set()
        for c in candidates:
            assert (c.passage_id, c.sentence_index) not in seen
            seen.add((c.passage_id, c.sentence_index))
            assert c.tower_tokens.ids[0] == CLS_ID
            assert c.tower_tokens.ids.count(SEP_ID) == 1
            assert len(c.tower_tokens) <= D_LEN

    def test_toy_candidates_outnumber_examples(self, small_toy):
        # Mirrors the published benchmark shape: more (sentence, passage)
        # candidates than question tuples.
        store, entries, vocab = small_toy
        examples, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        assert len(candidates) >= len(examples)

    def test_qa_file_roundtrip(self, small_toy):
        _, entries, _ = small_toy
        buf = io.StringIO()
        write_qa_entries(buf, entries)
        loaded = read_qa_entries(buf.getvalue().splitlines())
        assert loaded == entries


def _numbered_examples(n):
    from twotower.benchmark import ReqaExample
    from twotower.corpus import TokenSeq

    return [ReqaExample(f"question {i}", TokenSeq([CLS_ID, 5 + i]), i) for i in range(n)]


class TestMakeSplit:
    def test_80_20_arithmetic(self):
        split = make_split(_numbered_examples(100), (80, 20), seed=0)
        assert len(split.train) == 72
        assert len(split.validation) == 8
        assert len(split.test) == 20

    def test_duplicate_questions_co_assigned(self):
        examples = _numbered_examples(30)
        examples += [
            type(examples[0])(examples[i].question, examples[i].question_tokens, 100 + i)
            for i in range(30)
        ]
        split = make_split(examples, (50, 50), seed=3)
        parts = {
            q: part
            for part, exs in (("train", split.train), ("val", split.validation), ("test", split.test))
            for q in {e.question for e in exs}
        }
        for part_a in (split.train, split.validation, split.test):
            for ex in part_a:
                assert parts[ex.question] is not None
        train_qs = {e.question for e in split.train}
        val_qs = {e.question for e in split.validation}
        test_qs = {e.question for e in split.test}
        assert not (train_qs & val_qs or train_qs & test_qs or val_qs & test_qs)

    def test_same_seed_identical(self):
        a = make_split(_numbered_examples(50), (80, 20), seed=9)
        b = make_split(_numbered_examples(50), (80, 20), seed=9)
        assert [e.gold_id for e in a.train] == [e.gold_id for e in b.train]
        assert [e.gold_id for e in a.test] == [e.gold_id for e in b.test]

    def test_empty_part_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_split(_numbered_examples(4), (80, 20), seed=0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError):
            make_split(_numbered_examples(100), (80, 10), seed=0)


class TestAugment:
    def test_limit_zero_is_identity(self, small_toy):
        store, entries, vocab = small_toy
        _, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        out = augment_open_domain(candidates, [("a b", "a b c d")], 0, vocab, D_LEN)
        assert len(out) == len(candidates)

    def test_appends_with_fresh_ids(self, small_toy):
        store, entries, vocab = small_toy
        _, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        external = [("one two", "one two three"), ("four five", "four five six")]
        out = augment_open_domain(candidates, external, 10, vocab, D_LEN)
        assert len(out) == len(candidates) + 2
        new_ids = {c.id for c in out[len(candidates):]}
        assert not new_ids & {c.id for c in candidates}
        assert len({(c.passage_id, c.sentence_index) for c in out}) == len(out)

    def test_duplicate_of_gold_kept_distinct(self, small_toy):
        store, entries, vocab = small_toy
        examples, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        gold = candidates[examples[0].gold_id]
        passage = store.passage(gold.passage_id)
        dup = (passage.sentences[gold.sentence_index].text, passage.text)
        out = augment_open_domain(candidates, [dup], 5, vocab, D_LEN)
        clone = out[-1]
        assert clone.id != gold.id
        assert clone.tower_tokens.ids == gold.tower_tokens.ids

    def test_distractor_sampling_excludes_referenced(self, small_toy):
        store, entries, vocab = small_toy
        referenced = {e.passage_id for e in entries}
        distractors = sample_distractors(store, referenced, 50, seed=1)
        assert len(distractors) == 50
        referenced_texts = {store.passage(p).text for p in referenced}
        for _, passage_text in distractors:
            assert passage_text not in referenced_texts


class TestEvaluate:
    def test_gold_always_first(self):
        ranked = [RankedList([7, 1, 2], [3.0, 2.0, 1.0])] * 4
        report = evaluate(ranked, [7, 7, 7, 7], ks=(1, 5))
        assert report.recalls[1] == 1.0
        assert report.recalls[5] == 1.0

    def test_counting_example(self):
        # golds at ranks 3 and 7 (1-based)
        first = RankedList(list(range(10)), [float(10 - i) for i in range(10)])
        ranked = [first, first]
        report = evaluate(ranked, [2, 6], ks=(5, 10))
        assert report.recalls[5] == 0.5
        assert report.recalls[10] == 1.0

    def test_missing_ranked_list_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            evaluate([None], [0], ks=(1,))

    def test_monotone_in_k(self):
        rng = subrng(40)
        ranked = []
        golds = []
        for _ in range(30):
            ids = list(rng.permutation(50))
            ranked.append(RankedList(ids, list(np.linspace(1, 0, 50))))
            golds.append(int(rng.integers(50)))
        report = evaluate(ranked, golds, ks=(1, 5, 10, 25, 50))
        values = [report.recalls[k] for k in (1, 5, 10, 25, 50)]
        assert values == sorted(values)

    def test_random_ranking_expectation(self):
        # Monte-Carlo: mean R@k over seeded shuffles approaches k/N.
        n, k, queries, shuffles = 50, 5, 20, 1000
        rng = subrng(41)
        total = 0.0
        for _ in range(shuffles):
            hits = 0
            for _ in range(queries):
                ids = list(rng.permutation(n))
                gold = int(rng.integers(n))
                hits += gold in ids[:k]
            total += hits / queries
        mean = total / shuffles
        p = k / n
        sigma = (p * (1 - p) / (queries * shuffles)) ** 0.5
        assert abs(mean - p) <= 3 * sigma


class TestExperiment:
    def test_task_spec_parsing(self):
        assert parse_task_spec("none") is None
        assert parse_task_spec("mlm") is None
        assert set(parse_task_spec("ict+bfs+wlp").weights) == {"ict", "bfs", "wlp"}
        assert set(parse_task_spec("ict").weights) == {"ict"}
        with pytest.raises(ValueError):
            parse_task_spec("ict+nope")

    def test_single_cell_grid(self):
        store, entries = build_toy(SynthConfig(n_articles=30, n_topics=6, n_qa=60, seed=13))
        cfg = ExperimentConfig(
            ratios=[[60, 40]],
            encoders=["transformer"],
            tasks=["none"],
            seeds=[5],
            include_bm25=False,
            pretrain_steps=0,
            finetune_steps=4,
            batch_size=4,
            eval_every=2,
            num_layers=1,
            hidden_dim=16,
            num_heads=2,
            ff_dim=32,
            emb_dim=8,
            vocab_max_size=4096,
        )
        report = run_experiment(store, entries, cfg, log=lambda msg: None)
        assert len(report["cells"]) == 1
        cell = report["cells"][0]
        assert cell["encoder"] == "transformer"
        assert cell["task"] == "none"
        recalls = [cell["recalls"][str(k)] for k in cfg.ks]
        assert recalls == sorted(recalls)
        assert all(0.0 <= r <= 1.0 for r in recalls)

    def test_bm25_cell_and_augmented_rows(self):
        store, entries = build_toy(SynthConfig(n_articles=30, n_topics=6, n_qa=60, seed=13))
        cfg = ExperimentConfig(
            ratios=[[60, 40]],
            encoders=[],
            tasks=[],
            seeds=[5],
            include_bm25=True,
            augment_limit=25,
            vocab_max_size=4096,
        )
        report = run_experiment(store, entries, cfg, log=lambda msg: None)
        kinds = {(c["encoder"], c["augmented"]) for c in report["cells"]}
        assert kinds == {("bm25", False), ("bm25", True)}
        aug = next(c for c in report["cells"] if c["augmented"])
        assert aug["n_candidates"] > next(
            c for c in report["cells"] if not c["augmented"]
        )["n_candidates"]

    def test_fixed_ranking_gold_rank_monotone_under_augmentation(self, small_toy):
        # With a fixed scoring function, growing the candidate set can only
        # push the gold down (fresh ids lose score ties to existing ones).
        store, entries, vocab = small_toy
        examples, candidates, _ = build_reqa(entries, store, vocab, Q_LEN, D_LEN)
        referenced = {e.passage_id for e in entries}
        distractors = sample_distractors(store, referenced, 40, seed=2)
        augmented = augment_open_domain(candidates, distractors, 40, vocab, D_LEN)

        from twotower.encoders import EncoderConfig, init_params
        from twotower.retrieval import build_dense_index, dense_topk
        from twotower.encoders import encode

        enc_cfg = EncoderConfig(
            arch="bow_mlp", num_layers=1, hidden_dim=16, num_heads=2, ff_dim=16,
            emb_dim=8, vocab_size=len(vocab), query_max_len=Q_LEN, doc_max_len=D_LEN,
            dtype="float64",
        )
        params = init_params(enc_cfg, subrng(44), "doc")
        base_index = build_dense_index(params, enc_cfg, [c.tower_tokens for c in candidates],
                                       candidate_ids=[c.id for c in candidates])
        aug_index = build_dense_index(params, enc_cfg, [c.tower_tokens for c in augmented],
                                      candidate_ids=[c.id for c in augmented])
        q_params = init_params(enc_cfg, subrng(45), "query")
        for ex in examples[:25]:
            q_emb = encode(q_params, enc_cfg, [ex.question_tokens], "query")[0]
            base_rank = dense_topk(base_index, q_emb, len(candidates)).ids.index(ex.gold_id)
            aug_rank = dense_topk(aug_index, q_emb, len(augmented)).ids.index(ex.gold_id)
            assert aug_rank >= base_rank

    def test_summarize_cells_means(self):
        cells = [
            {"ratio": "80/20", "encoder": "e", "task": "t", "augmented": False,
             "recalls": {"1": 0.2, "5": 0.4}, "seed": 1},
            {"ratio": "80/20", "encoder": "e", "task": "t", "augmented": False,
             "recalls": {"1": 0.4, "5": 0.6}, "seed": 2},
        ]
        means = summarize_cells(cells, ks=(1, 5))
        assert len(means) == 1
        assert means[0]["recalls"]["1"] == pytest.approx(0.3)
        assert means[0]["recalls"]["5"] == pytest.approx(0.5)
        assert means[0]["n_seeds"] == 2
