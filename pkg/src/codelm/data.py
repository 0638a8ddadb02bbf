"""Corpus pipeline: raw records to pretraining examples.

Covers tokenized chunking of unimodal code, the three causal/denoising
example builders, bimodal text-code pairs, a deterministic synthetic
micro-corpus, and JSON-lines ingestion.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import CLM, CLS, EOS, PAD, TokenSequence, Vocab, mask_id

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class Task(enum.Enum):
    SPAN_DENOISE = "span_denoise"
    SEQ2SEQ_CLM = "seq2seq_clm"
    DECODER_CLM = "decoder_clm"
    BIMODAL = "bimodal"


@dataclass
class CorpusRecord:
    code: str
    lang: str = "python"
    text: str | None = None

    def __post_init__(self):
        if not self.code:
            raise DataError("record has empty code field")

    @property
    def bimodal(self) -> bool:
        return self.text is not None


@dataclass
class PretrainExample:
    task: Task
    source_ids: list[int] = field(default_factory=list)
    target_ids: list[int] = field(default_factory=list)
    text_ids: list[int] | None = None
    code_ids: list[int] | None = None
    # denoising only: (start, length) spans as sampled, before word expansion
    raw_spans: list[tuple[int, int]] | None = None


def example_rng(root_seed: int, index: int) -> np.random.Generator:
    """Independent per-example stream derived from a root seed."""
    return np.random.default_rng([root_seed, index])


def pad_batch(seqs, length: int | None = None):
    """Right-pad id lists with [PAD] to a common length.

    Returns (ids B x T int64, pad_mask B x T bool) with True at pads.
    Sequences longer than an explicit length are truncated.
    """
    seqs = [list(s) for s in seqs]
    if not seqs:
        raise DataError("empty batch")
    if length is None:
        length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.ones((len(seqs), length), dtype=bool)
    for i, seq in enumerate(seqs):
        n = min(len(seq), length)
        ids[i, :n] = seq[:n]
        mask[i, :n] = False
    return ids, mask


def chunk_corpus(records, vocab: Vocab, chunk_len: int) -> list[TokenSequence]:
    """Tokenize record code in order, join with [EOS] separators, and split
    into chunks of exactly chunk_len tokens.  A final shorter remainder is
    kept only if it is at least chunk_len/4 tokens long.
    """
    if chunk_len < 16:
        raise DataError(f"chunk_len must be >= 16, got {chunk_len}")
    ids: list[int] = []
    starts: list[bool] = []
    for i, rec in enumerate(records):
        if i > 0:
            ids.append(EOS)
            starts.append(True)
        seq = vocab.encode(rec.code)
        ids.extend(seq.ids)
        starts.extend(seq.word_start)
    if not ids:
        raise DataError("empty corpus")
    chunks = []
    for pos in range(0, len(ids), chunk_len):
        piece_ids = ids[pos:pos + chunk_len]
        if len(piece_ids) < chunk_len and len(piece_ids) * 4 < chunk_len:
            break
        chunks.append(TokenSequence(piece_ids, starts[pos:pos + chunk_len]))
    return chunks


def _place_spans(length: int, n_spans: int, rng) -> list[tuple[int, int]]:
    """Sample non-overlapping (start, span_len) pairs.  Lengths are integer
    uniform on {1..5}; starts are resampled up to 100 times on collision,
    then the span shrinks by one and tries again.
    """
    taken = np.zeros(length, dtype=bool)
    spans = []
    for _ in range(n_spans):
        span_len = int(rng.integers(1, 6))
        placed = False
        while span_len >= 1 and not placed:
            for _ in range(100):
                start = int(rng.integers(0, length - span_len + 1))
                if not taken[start:start + span_len].any():
                    taken[start:start + span_len] = True
                    spans.append((start, span_len))
                    placed = True
                    break
            else:
                span_len -= 1
        if not placed:
            raise DataError("could not place masking span; chunk too dense")
    spans.sort()
    return spans


def make_span_denoising_example(chunk: TokenSequence, rng,
                                rate: float = 0.15,
                                mean_span: int = 3) -> PretrainExample:
    """Mask ~rate of the chunk in short spans, expanded outward to word
    boundaries.  Source replaces each span with [MASKi]; the target lists
    each sentinel followed by its span, ending with [EOS].
    """
    length = len(chunk)
    if length < 8 or rate * length < 1:
        raise DataError(f"chunk too short for span denoising: {length}")
    n_spans = max(1, round(rate * length / mean_span))
    if n_spans > 100:
        raise DataError("more spans than sentinel tokens")
    raw = _place_spans(length, n_spans, rng)

    # expand to word boundaries without crossing a neighboring span
    expanded = []
    for i, (start, span_len) in enumerate(raw):
        end = start + span_len
        lo = expanded[-1][1] if expanded else 0
        hi = raw[i + 1][0] if i + 1 < len(raw) else length
        while start > lo and not chunk.word_start[start]:
            start -= 1
        while end < hi and not chunk.word_start[end]:
            end += 1
        expanded.append((start, end))

    source, target = [], []
    cursor = 0
    for i, (start, end) in enumerate(expanded):
        source.extend(chunk.ids[cursor:start])
        source.append(mask_id(i))
        target.append(mask_id(i))
        target.extend(chunk.ids[start:end])
        cursor = end
    source.extend(chunk.ids[cursor:])
    target.append(EOS)
    return PretrainExample(Task.SPAN_DENOISE, source, target,
                           raw_spans=[(s, l) for s, l in raw])


def splice_denoised(source_ids, target_ids) -> list[int]:
    """Inverse of span denoising: substitute target spans back into the
    sentinel positions of the source.  Used as the reconstruction oracle.
    """
    if not target_ids or target_ids[-1] != EOS:
        raise DataError("denoising target must end with [EOS]")
    spans: dict[int, list[int]] = {}
    current = None
    # only the final token terminates; a span may itself contain [EOS]
    for tid in target_ids[:-1]:
        if 9 <= tid <= 108:
            current = []
            spans[tid] = current
        else:
            if current is None:
                raise DataError("span token before first sentinel")
            current.append(tid)
    out = []
    for tid in source_ids:
        if 9 <= tid <= 108:
            out.extend(spans[tid])
        else:
            out.append(tid)
    return out


def make_seq2seq_clm_example(chunk: TokenSequence, rng) -> PretrainExample:
    """Split the chunk at a uniform pivot in [10%, 90%]; the source is the
    prefix behind a [CLM] marker and the target is the suffix.
    """
    length = len(chunk)
    if length < 10:
        raise DataError(f"chunk too short for seq2seq CLM: {length}")
    lo = math.ceil(0.1 * length)
    hi = math.floor(0.9 * length)
    pivot = int(rng.integers(lo, hi + 1))
    return PretrainExample(Task.SEQ2SEQ_CLM,
                           [CLM] + chunk.ids[:pivot],
                           chunk.ids[pivot:])


def make_decoder_only_clm_example(chunk: TokenSequence,
                                  max_target: int | None = None
                                  ) -> PretrainExample:
    if len(chunk) == 0:
        raise DataError("empty chunk")
    target = chunk.ids if max_target is None else chunk.ids[:max_target]
    return PretrainExample(Task.DECODER_CLM, [CLM], list(target))


def make_bimodal_example(text: str, code: str, vocab: Vocab,
                         max_code: int = 420,
                         max_text: int = 128) -> PretrainExample:
    if not text or not text.strip():
        raise DataError("empty text field")
    if not code or not code.strip():
        raise DataError("empty code field")
    text_ids = ([CLS] + vocab.encode(text).ids)[:max_text]
    code_ids = ([CLS] + vocab.encode(code).ids)[:max_code]
    return PretrainExample(Task.BIMODAL, text_ids=text_ids, code_ids=code_ids)


# (description, operator) pairs with pairwise-distinct semantics
_TOY_OPS = [
    ("sum", "+"),
    ("difference", "-"),
    ("product", "*"),
    ("quotient", "/"),
    ("floor quotient", "//"),
    ("remainder", "%"),
    ("power", "**"),
    ("bitwise and", "&"),
    ("bitwise or", "|"),
    ("bitwise xor", "^"),
    ("left shift", "<<"),
    ("right shift", ">>"),
    ("less-than comparison", "<"),
    ("greater-than comparison", ">"),
    ("at-most comparison", "<="),
    ("at-least comparison", ">="),
]


def synth_toy_corpus(seed: int, n: int) -> list[CorpusRecord]:
    """Deterministic bimodal micro-corpus over a fixed operator set."""
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(seed)
    records = []
    order: list[int] = []
    for _ in range(n):
        if not order:
            order = list(rng.permutation(len(_TOY_OPS)))
        name, op = _TOY_OPS[order.pop(0)]
        records.append(CorpusRecord(
            code=f"def f(a, b):\n    return a {op} b",
            lang="python",
            text=f"return the {name} of a and b"))
    return records


_UNIMODAL_KEYS = {"code", "lang"}
_BIMODAL_KEYS = {"code", "lang", "text"}


def _parse_record(line: str) -> CorpusRecord:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise DataError("record is not an object")
    keys = set(obj)
    if keys not in (_UNIMODAL_KEYS, _BIMODAL_KEYS):
        raise DataError(f"unexpected record keys: {sorted(keys)}")
    for key in keys:
        if not isinstance(obj[key], str):
            raise DataError(f"field {key!r} is not a string")
    if not obj["code"]:
        raise DataError("empty code field")
    return CorpusRecord(code=obj["code"], lang=obj["lang"],
                        text=obj.get("text"))


def read_jsonl(path) -> list[CorpusRecord]:
    """Load corpus records, skipping invalid lines with a warning.  More
    than 10% invalid lines aborts the load.
    """
    records, invalid, total = [], 0, 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                records.append(_parse_record(line))
            except (DataError, json.JSONDecodeError) as exc:
                invalid += 1
                log.debug("skipping line %d of %s: %s", lineno, path, exc)
    if invalid:
        log.warning("%s: skipped %d of %d invalid lines", path, invalid, total)
    if total and invalid * 10 > total:
        raise DataError(
            f"{path}: {invalid}/{total} invalid lines exceeds 10% threshold")
    return records


def write_jsonl(records, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"code": rec.code, "lang": rec.lang}
            if rec.text is not None:
                obj["text"] = rec.text
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    os.replace(tmp, path)
