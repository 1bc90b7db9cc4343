import math

import numpy as np
import pytest

from dynaeval.corpus import (
    CorpusError,
    CorpusStream,
    SyntheticSpec,
    concatenate_documents,
    corpus_stats,
    entropy_rate,
    load_corpus,
    load_manifest,
    random_chain,
    sample_finetune_batches,
    sample_segment_starts,
    stationary_distribution,
    stream_entropy_floor,
    synthesize_stream,
)
from dynaeval.tokenizers import BpeTokenizer, ByteTokenizer


class TestLoadCorpus:
    def test_concatenation_boundaries(self, tmp_path):
        (tmp_path / "a.txt").write_text("0123456789")
        (tmp_path / "b.txt").write_text("abcde")
        stream = load_corpus([tmp_path / "a.txt", tmp_path / "b.txt"], ByteTokenizer())
        assert len(stream) == 15
        assert stream.doc_boundaries == [0, 10]
        assert stream.doc_ids[9] == 0 and stream.doc_ids[10] == 1

    def test_deterministic(self, tmp_path):
        (tmp_path / "a.txt").write_text("hello world")
        files = [tmp_path / "a.txt"]
        s1 = load_corpus(files, ByteTokenizer())
        s2 = load_corpus(files, ByteTokenizer())
        assert np.array_equal(s1.tokens, s2.tokens)

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(CorpusError, match="nope.txt"):
            load_corpus([tmp_path / "nope.txt"], ByteTokenizer())

    def test_empty_document_skipped_with_warning(self, tmp_path, caplog):
        (tmp_path / "a.txt").write_text("")
        (tmp_path / "b.txt").write_text("xy")
        with caplog.at_level("WARNING"):
            stream = load_corpus([tmp_path / "a.txt", tmp_path / "b.txt"], ByteTokenizer())
        assert stream.num_docs == 1
        assert "a.txt" in caplog.text

    def test_manifest(self, tmp_path):
        (tmp_path / "a.txt").write_text("aa")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "b.txt").write_text("bb")
        (tmp_path / "m.txt").write_text("a.txt\n# comment\nsub/b.txt\n")
        files = load_manifest(tmp_path / "m.txt")
        assert [f.name for f in files] == ["a.txt", "b.txt"]


class TestTokenizers:
    @pytest.mark.parametrize("seed", range(10))
    def test_byte_round_trip_random_utf8(self, seed):
        rng = np.random.default_rng(seed)
        chars = [chr(c) for c in rng.integers(1, 0x10000, size=200) if chr(c).isprintable()]
        text = "".join(chars)
        tok = ByteTokenizer()
        assert tok.decode(tok.encode(text)) == text

    def test_bpe_round_trip(self):
        text = "the quick brown fox jumps over the lazy dog " * 20
        tok = BpeTokenizer.train(text, vocab_size=300)
        assert tok.vocab_size > 256
        encoded = tok.encode("the quick fox žluťoučký kůň")
        assert tok.decode(encoded) == "the quick fox žluťoučký kůň"

    def test_bpe_compresses(self):
        text = "abab" * 100
        tok = BpeTokenizer.train(text, vocab_size=300)
        assert len(tok.encode(text)) < len(text.encode("utf-8"))

    def test_bpe_deterministic(self):
        text = "banana bandana " * 50
        t1 = BpeTokenizer.train(text, vocab_size=280)
        t2 = BpeTokenizer.train(text, vocab_size=280)
        assert t1.merges == t2.merges
        assert t1.tokenizer_id == t2.tokenizer_id

    def test_bpe_save_load(self, tmp_path):
        tok = BpeTokenizer.train("hello hello hello world", vocab_size=270)
        tok.save(tmp_path / "tok.json")
        loaded = BpeTokenizer.load(tmp_path / "tok.json")
        assert loaded.merges == tok.merges


class TestSampling:
    def stream(self, n=1000):
        rng = np.random.default_rng(0)
        return CorpusStream(rng.integers(0, 16, size=n), [0], np.zeros(n, dtype=np.int64))

    def test_deterministic_batches(self):
        s = self.stream()
        b1 = list(sample_finetune_batches(s, 16, 4, seed=9, num_batches=5))
        b2 = list(sample_finetune_batches(s, 16, 4, seed=9, num_batches=5))
        for x, y in zip(b1, b2):
            assert np.array_equal(x, y)

    def test_segment_shape(self):
        for batch in sample_finetune_batches(self.stream(), 16, 4, seed=1, num_batches=3):
            assert batch.shape == (4, 16)

    def test_too_short_rejected(self):
        with pytest.raises(CorpusError, match="too short"):
            next(sample_finetune_batches(self.stream(10), 16, 2, seed=0))

    def test_start_distribution_uniform(self):
        from scipy import stats as sps

        s = self.stream(216)
        seg = 16
        starts = []
        rng_draws = 10000
        for batch_starts in [sample_segment_starts(s, seg, rng_draws, seed=5)]:
            starts = np.asarray(batch_starts)
        valid = len(s) - seg
        counts = np.bincount(starts, minlength=valid)
        _, p = sps.chisquare(counts)
        assert p > 0.01

    def test_fixed_starts_cycle(self):
        s = self.stream()
        starts = sample_segment_starts(s, 16, 8, seed=2)
        batches = list(sample_finetune_batches(s, 16, 4, seed=3, num_batches=4, starts=starts))
        assert len(batches) == 4


class TestSynthetic:
    def test_rows_validated(self):
        bad = np.array([[0.5, 0.6], [0.5, 0.5]])
        with pytest.raises(CorpusError, match="sum to 1"):
            SyntheticSpec(regimes=[(bad, 100)])

    def test_identity_dominant_gives_runs(self):
        m = np.full((4, 4), 0.02)
        np.fill_diagonal(m, 0.94)
        spec = SyntheticSpec(regimes=[(m, 2000)], seed=1)
        s = synthesize_stream(spec)
        repeats = float((s.tokens[1:] == s.tokens[:-1]).mean())
        assert repeats > 0.8

    def test_boundaries_at_regime_switches(self):
        a = random_chain(8, 1.0, seed=1)
        b = random_chain(8, 1.0, seed=2)
        spec = SyntheticSpec(regimes=[(a, 500), (b, 300), (a, 200)], seed=3)
        s = synthesize_stream(spec)
        assert s.doc_boundaries == [0, 500, 800]
        assert s.doc_ids[499] == 0 and s.doc_ids[500] == 1 and s.doc_ids[999] == 2

    def test_bigram_frequencies_match_matrix(self):
        m = random_chain(6, 1.2, seed=4)
        spec = SyntheticSpec(regimes=[(m, 100_000)], seed=5)
        s = synthesize_stream(spec)
        toks = s.tokens
        for state in range(6):
            idx = np.nonzero(toks[:-1] == state)[0]
            empirical = np.bincount(toks[idx + 1], minlength=6) / idx.size
            tv = 0.5 * np.abs(empirical - m[state]).sum()
            assert tv < 0.02, f"row {state} total variation {tv}"

    def test_determinism(self):
        m = random_chain(5, 1.0, seed=6)
        spec = SyntheticSpec(regimes=[(m, 1000)], seed=7)
        assert np.array_equal(synthesize_stream(spec).tokens, synthesize_stream(spec).tokens)

    def test_entropy_rate_against_sample_estimate(self):
        # empirical cross-entropy of the true model on its own sample
        m = random_chain(5, 1.5, seed=8)
        rate = entropy_rate(m)
        spec = SyntheticSpec(regimes=[(m, 200_000)], seed=9)
        s = synthesize_stream(spec)
        toks = s.tokens
        nll = -np.log(m[toks[:-1], toks[1:]])
        assert abs(float(nll.mean()) - rate) < 0.01

    def test_stationary_distribution(self):
        m = random_chain(4, 1.0, seed=10)
        pi = stationary_distribution(m)
        np.testing.assert_allclose(pi @ m, pi, atol=1e-10)
        assert pi.sum() == pytest.approx(1.0)

    def test_floor_is_weighted(self):
        a = random_chain(4, 0.1, seed=11)  # near uniform, high entropy
        b = random_chain(4, 3.0, seed=12)  # peaky, low entropy
        spec = SyntheticSpec(regimes=[(a, 100), (b, 300)])
        floor = stream_entropy_floor(spec)
        expected = (entropy_rate(a) * 100 + entropy_rate(b) * 300) / 400
        assert floor == pytest.approx(expected)
        assert entropy_rate(b) < floor < entropy_rate(a)


class TestStats:
    def test_two_docs_two_log_bins(self):
        docs = [np.zeros(10, dtype=np.int64), np.ones(1000, dtype=np.int64)]
        stream = concatenate_documents(docs, "raw-int")
        stats = corpus_stats(stream)
        counts = stats["length_hist"]["counts"]
        assert sum(1 for c in counts if c > 0) == 2

    def test_uniform_tokens_flat_curve(self):
        rng = np.random.default_rng(13)
        stream = CorpusStream(rng.integers(0, 16, size=64_000), [0], np.zeros(64_000, dtype=np.int64))
        stats = corpus_stats(stream)
        counts = np.array(stats["token_freq"]["counts"], dtype=np.float64)
        assert counts.max() / counts.min() < 1.2

    def test_sorted_by_reference(self):
        ref = CorpusStream(np.array([2, 2, 2, 1, 1, 0]), [0], np.zeros(6, dtype=np.int64))
        own = CorpusStream(np.array([0, 0, 0, 1, 2]), [0], np.zeros(5, dtype=np.int64))
        stats = corpus_stats(own, reference=ref)
        assert stats["token_freq"]["ids"] == [2, 1, 0]
        assert stats["token_freq"]["counts"] == [1, 1, 3]
        assert stats["token_freq"]["reference_counts"] == [3, 2, 1]

    def test_frac_exceeding_context(self):
        docs = [np.zeros(10, dtype=np.int64), np.zeros(100, dtype=np.int64), np.zeros(200, dtype=np.int64)]
        stream = concatenate_documents(docs, "raw-int")
        stats = corpus_stats(stream, context_length=50)
        assert stats["frac_docs_exceeding_context"] == pytest.approx(2 / 3)


@pytest.mark.parametrize("seed", range(8))
def test_boundary_doc_id_consistency_random(seed):
    rng = np.random.default_rng(seed)
    docs = [rng.integers(0, 8, size=rng.integers(1, 40)) for _ in range(rng.integers(1, 6))]
    stream = concatenate_documents(docs, "raw-int")
    # doc_ids change exactly at boundaries
    starts = [0] + [i for i in range(1, len(stream)) if stream.doc_ids[i] != stream.doc_ids[i - 1]]
    assert starts == stream.doc_boundaries
    assert stream.doc_lengths() == [len(d) for d in docs]
