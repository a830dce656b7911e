"""Synthetic corpora, subsampling, vocab, and JSONL round-trips."""

import numpy as np
import pytest

from prefixlab.data import (
    BOS_ID,
    EOS_ID,
    SEG_ID,
    UNK_ID,
    Corpus,
    Example,
    SyntheticTaskSpec,
    Vocab,
    generate_copy_corpus,
    generate_synthetic,
    load_jsonl,
    make_task_splits,
    oracle_salient_decoder,
    save_jsonl,
    subsample,
)
from prefixlab.errors import ConfigError, ParseError
from prefixlab.rouge import rouge_l


class TestVocab:
    def test_reserved_layout(self):
        v = Vocab.of_size(10)
        assert v.token_of(0) == "<pad>" and v.token_of(4) == "<seg>"
        assert v.id_of("w5") == 5

    def test_unknown_maps_to_unk(self):
        v = Vocab.of_size(8)
        assert v.id_of("nope") == UNK_ID

    def test_save_load_round_trip(self, tmp_path):
        v = Vocab.from_texts(["b a a", "c b"])
        v.save(tmp_path / "vocab.txt")
        w = Vocab.load(tmp_path / "vocab.txt")
        assert len(v) == len(w)
        assert all(w.id_of(v.token_of(i)) == i for i in range(len(v)))

    def test_frequency_then_alpha_order(self):
        v = Vocab.from_texts(["b a a b b", "c"])
        assert v.id_of("b") == 5 and v.id_of("a") == 6 and v.id_of("c") == 7


class TestSyntheticTask:
    SPEC = SyntheticTaskSpec(n_segments=2, segment_length=5,
                             distractor_vocab=12, salient_vocab=6, seed=3)

    def test_single_segment_copy_task(self):
        spec = SyntheticTaskSpec(n_segments=1, segment_length=4,
                                 distractor_vocab=5, salient_vocab=3, seed=0)
        corpus = generate_synthetic(spec, 10)
        for ex in corpus:
            assert len(ex.target) == 1
            assert ex.target[0] in spec.salient_range
            assert ex.source[0] == BOS_ID and ex.source[-1] == EOS_ID
            assert SEG_ID not in ex.source

    def test_determinism(self):
        a = generate_synthetic(self.SPEC, 20)
        b = generate_synthetic(self.SPEC, 20)
        assert [e.source for e in a] == [e.source for e in b]

    def test_structure_and_salience(self):
        corpus = generate_synthetic(self.SPEC, 50)
        for ex in corpus:
            assert sum(ex.spans) == len(ex.source)
            assert len(ex.spans) == 2
            assert list(ex.source).count(SEG_ID) == 1
            # each target token appears in its segment exactly once
            bounds = np.cumsum((0,) + ex.spans)
            for seg, tok in enumerate(ex.target):
                segment = ex.source[bounds[seg]:bounds[seg + 1]]
                assert list(segment).count(tok) == 1

    def test_oracle_decoder_reaches_rouge_one(self):
        corpus = generate_synthetic(self.SPEC, 30)
        scores = [rouge_l(oracle_salient_decoder(ex), list(ex.target)).f1
                  for ex in corpus]
        assert scores == [1.0] * 30

    def test_contrast_layout(self):
        spec = SyntheticTaskSpec(n_segments=2, segment_length=4,
                                 distractor_vocab=8, salient_vocab=4,
                                 contrast_vocab=4, seed=1)
        assert len(set(spec.salient_range) & set(spec.contrast_range)) == 0
        assert len(set(spec.contrast_range) & set(spec.distractor_range)) == 0
        corpus = generate_synthetic(spec, 20)
        for ex in corpus:
            assert all(t in spec.salient_range for t in ex.target)
            bounds = np.cumsum((0,) + ex.spans)
            for seg in range(2):
                segment = ex.source[bounds[seg]:bounds[seg + 1]]
                assert sum(t in spec.salient_range for t in segment) == 1
                assert sum(t in spec.contrast_range for t in segment) == 1

    def test_contrast_rule_selects_contrast_tokens(self):
        spec = SyntheticTaskSpec(n_segments=2, segment_length=4,
                                 distractor_vocab=8, salient_vocab=4,
                                 contrast_vocab=4, seed=1,
                                 target_rule="contrast")
        for ex in generate_synthetic(spec, 10):
            assert all(t in spec.contrast_range for t in ex.target)

    def test_mixed_rule_uses_both_ranges(self):
        spec = SyntheticTaskSpec(n_segments=2, segment_length=4,
                                 distractor_vocab=8, salient_vocab=4,
                                 contrast_vocab=4, seed=1, target_rule="mixed")
        corpus = generate_synthetic(spec, 100)
        kinds = {"salient" if ex.target[0] in spec.salient_range else "contrast"
                 for ex in corpus}
        assert kinds == {"salient", "contrast"}

    def test_rule_validation(self):
        with pytest.raises(ConfigError):
            SyntheticTaskSpec(target_rule="mixed")  # needs a contrast range
        with pytest.raises(ConfigError):
            SyntheticTaskSpec(target_rule="upside-down")

    def test_vocab_overflow_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticTaskSpec(distractor_vocab=200_000)

    def test_copy_corpus_targets_equal_content(self):
        corpus = generate_copy_corpus(self.SPEC, 5, seed=9)
        for ex in corpus:
            content = [t for t in ex.source if t not in (BOS_ID, EOS_ID, SEG_ID)]
            assert list(ex.target) == content


class TestSubsample:
    def _corpus(self, n=100):
        return generate_synthetic(SyntheticTaskSpec(seed=5), n)

    def test_identity_at_100(self):
        corpus = self._corpus(40)
        out = subsample(corpus, 100, seed=0)
        assert [e.source for e in out] == [e.source for e in corpus]

    def test_exact_count(self):
        assert len(subsample(self._corpus(100), 50, seed=0)) == 50
        assert len(subsample(self._corpus(100), 5, seed=0)) == 5
        assert len(subsample(self._corpus(30), 25, seed=0)) == 7  # floor(7.5)

    def test_examples_unmutated(self):
        corpus = self._corpus(50)
        out = subsample(corpus, 20, seed=1)
        originals = {e.source for e in corpus}
        assert all(e.source in originals for e in out)

    def test_deterministic_per_seed_and_seed_sensitive(self):
        corpus = self._corpus(100)
        a = subsample(corpus, 10, seed=1)
        b = subsample(corpus, 10, seed=1)
        c = subsample(corpus, 10, seed=2)
        assert [e.source for e in a] == [e.source for e in b]
        assert [e.source for e in a] != [e.source for e in c]

    def test_overlap_statistics_across_seeds(self):
        # two independent k% samples overlap near k^2*N on average
        corpus = self._corpus(100)
        k = 50
        overlaps = []
        for seed in range(100):
            a = {e.source for e in subsample(corpus, k, seed=seed)}
            b = {e.source for e in subsample(corpus, k, seed=seed + 1000)}
            overlaps.append(len(a & b))
        assert abs(np.mean(overlaps) - 25.0) < 3.0

    def test_empty_result_rejected(self):
        with pytest.raises(ConfigError):
            subsample(self._corpus(10), 5, seed=0)  # floor(0.5) == 0

    def test_bad_percent_rejected(self):
        with pytest.raises(ConfigError):
            subsample(self._corpus(10), 0, seed=0)
        with pytest.raises(ConfigError):
            subsample(self._corpus(10), 101, seed=0)


class TestJsonl:
    def test_empty_file_gives_empty_corpus(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        corpus = load_jsonl(path)
        assert len(corpus) == 0

    def test_round_trip_reproduces_ids(self, tmp_path):
        corpus = generate_synthetic(SyntheticTaskSpec(seed=7), 12)
        path = save_jsonl(corpus, tmp_path / "c.jsonl")
        back = load_jsonl(path, vocab=corpus.vocab)
        assert [e.source for e in back] == [e.source for e in corpus]
        assert [e.target for e in back] == [e.target for e in corpus]
        assert [e.spans for e in back] == [e.spans for e in corpus]

    def test_order_preserved(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"source": "a b", "target": "a"}\n'
                        '{"source": "c d", "target": "c"}\n'
                        '{"source": "e f", "target": "e"}\n')
        corpus = load_jsonl(path)
        assert len(corpus) == 3
        assert corpus.vocab.decode(corpus.examples[2].source) == "e f"

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"source": "a", "target": "a"}\nnot json\n')
        with pytest.raises(ParseError, match="line 2"):
            load_jsonl(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"source": "a"}\n')
        with pytest.raises(ParseError):
            load_jsonl(path)

    def test_unknown_tokens_map_to_unk(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"source": "a b", "target": "a"}\n')
        vocab = Vocab.from_texts(["a"])
        corpus = load_jsonl(path, vocab=vocab)
        assert corpus.examples[0].source[1] == UNK_ID


class TestSplits:
    def test_disjoint_seeds_give_distinct_corpora(self):
        spec = SyntheticTaskSpec(seed=11)
        splits = make_task_splits(spec, 20, 5, 5)
        assert {len(splits["train"]), len(splits["val"]), len(splits["test"])} \
            == {20, 5}
        assert [e.source for e in splits["train"].examples[:5]] != \
            [e.source for e in splits["val"]]

    def test_spans_partition_validation(self):
        with pytest.raises(ConfigError):
            Example((1, 2, 3), (1, 1), (1,))
