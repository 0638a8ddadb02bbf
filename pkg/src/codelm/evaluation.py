"""Retrieval, decoding, and text metrics.

The retrieval index is an archive of unit-norm code embeddings tied to the
producing checkpoint by content hash; querying with a different model is an
error rather than a silent quality bug.  Decoding covers greedy, beam with
length normalization, and nucleus sampling; retrieval-augmented generation
splices retrieved code behind the query text with [SEP] separators.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import pad_batch
from .model import Mode, Model, _decode_blob, _read_archive, _write_archive
from .tokenizer import (BOS, CDEC, CLM, CLS, EOS, MATCH, PAD, SEP, TDEC,
                        Vocab, mask_id)
from .training import frame_matching_input

_FORMAT_VERSION = 1
_RAG_SOURCE_LIMIT = 600

# decode-time ban: sentinels and task/control tokens never belong in output
_BANNED_IDS = np.array(
    sorted({PAD, BOS, CLS, CLM, MATCH, CDEC, TDEC, SEP}
           | {mask_id(i) for i in range(100)}), dtype=np.int64)


class EvalError(ValueError):
    pass


class DecodeMethod:
    GREEDY = "greedy"
    BEAM = "beam"
    NUCLEUS = "nucleus"


@dataclass
class GenerationConfig:
    method: str = DecodeMethod.GREEDY
    max_new_tokens: int = 64
    beam_size: int = 5
    length_norm: float = 1.0
    temperature: float = 1.2
    top_p: float = 0.95
    rag_top_k: int = 1

    def __post_init__(self):
        if self.method not in (DecodeMethod.GREEDY, DecodeMethod.BEAM,
                               DecodeMethod.NUCLEUS):
            raise EvalError(f"unknown decode method {self.method!r}")
        if self.max_new_tokens < 1:
            raise EvalError("max_new_tokens must be >= 1")
        if self.beam_size < 1:
            raise EvalError("beam_size must be >= 1")
        if not 0 < self.top_p <= 1:
            raise EvalError("top_p must be in (0, 1]")
        if self.temperature <= 0:
            raise EvalError("temperature must be positive")
        if self.rag_top_k < 0:
            raise EvalError("rag_top_k must be >= 0")


# ------------------------------------------------------------------- index


@dataclass
class RetrievalIndex:
    ids: np.ndarray                    # int64, ascending
    embeddings: np.ndarray             # float32 (n, d_proj), unit rows
    codes: list[str]
    langs: list[str]
    checkpoint_hash: str
    d_proj: int

    @property
    def size(self) -> int:
        return len(self.ids)


def embed_text(model: Model, text: str, vocab: Vocab) -> np.ndarray:
    ids = [CLS] + vocab.encode(text).ids
    _, cls_hidden = model.encode([ids])
    return model.project_embed(cls_hidden).data[0].astype(np.float32)


def build_index(model: Model, records, vocab: Vocab,
                batch_size: int = 8) -> RetrievalIndex:
    """Embed every record's code with the current encoder; ids are the
    record positions."""
    if not records:
        raise EvalError("cannot index an empty corpus")
    embs = []
    for start in range(0, len(records), batch_size):
        part = records[start:start + batch_size]
        ids, mask = pad_batch([[CLS] + vocab.encode(r.code).ids
                               for r in part])
        _, cls_hidden = model.encode(ids, mask)
        embs.append(model.project_embed(cls_hidden).data.astype(np.float32))
    return RetrievalIndex(
        ids=np.arange(len(records), dtype=np.int64),
        embeddings=np.concatenate(embs, axis=0),
        codes=[r.code for r in records],
        langs=[r.lang for r in records],
        checkpoint_hash=model.content_hash(),
        d_proj=model.config.d_proj)


def save_index(index: RetrievalIndex, path):
    manifest = {
        "format_version": _FORMAT_VERSION,
        "kind": "retrieval_index",
        "checkpoint_hash": index.checkpoint_hash,
        "d_proj": index.d_proj,
        "count": index.size,
        "codes": index.codes,
        "langs": index.langs,
        "tensors": {
            "ids": {"shape": [index.size], "dtype": "int64"},
            "embeddings": {"shape": list(index.embeddings.shape),
                           "dtype": "float32"},
        },
    }
    _write_archive(path, manifest, {"ids": index.ids,
                                    "embeddings": index.embeddings})


def load_index(path) -> RetrievalIndex:
    manifest, blobs = _read_archive(path)
    if manifest.get("kind") != "retrieval_index":
        raise EvalError(f"{path} is not a retrieval index")
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise EvalError("unsupported index format_version")
    ids = _decode_blob(blobs["ids"], manifest["tensors"]["ids"], "ids")
    embs = _decode_blob(blobs["embeddings"],
                        manifest["tensors"]["embeddings"], "embeddings")
    if len(ids) != manifest["count"] or len(manifest["codes"]) != len(ids):
        raise EvalError("index manifest is inconsistent")
    return RetrievalIndex(ids=ids, embeddings=embs,
                          codes=manifest["codes"], langs=manifest["langs"],
                          checkpoint_hash=manifest["checkpoint_hash"],
                          d_proj=manifest["d_proj"])


def rank_by_score(scores, ids) -> np.ndarray:
    """Indices sorted by score descending, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    return np.lexsort((ids, -scores))


def retrieve(model: Model, index: RetrievalIndex, text: str, vocab: Vocab,
             k: int):
    """Top-k codes by embedding dot product.  Returns (ids, scores, codes)
    in rank order."""
    if model.content_hash() != index.checkpoint_hash:
        raise EvalError("index was built from a different checkpoint")
    if not 1 <= k <= index.size:
        raise EvalError(f"k={k} outside [1, {index.size}]")
    query = embed_text(model, text, vocab).astype(np.float64)
    scores = index.embeddings.astype(np.float64) @ query
    order = rank_by_score(scores, index.ids)[:k]
    return (index.ids[order].tolist(), scores[order].tolist(),
            [index.codes[i] for i in order])


def rerank_matching(model: Model, text: str, codes, vocab: Vocab):
    """Order candidate codes by the matching head's positive-class
    probability (descending; ties by candidate position)."""
    if not codes:
        raise EvalError("no candidates to rerank")
    text_ids = [CLS] + vocab.encode(text).ids
    probs = []
    for code in codes:
        src, mask = pad_batch([text_ids])
        states, _ = model.encode(src, mask)
        framed, _ = pad_batch(
            [frame_matching_input([CLS] + vocab.encode(code).ids)])
        logits = model.matching_forward(states, framed,
                                        enc_pad_mask=mask).data[0]
        shifted = logits - logits.max()
        p = np.exp(shifted) / np.exp(shifted).sum()
        probs.append(float(p[1]))
    order = rank_by_score(probs, np.arange(len(codes)))
    return order.tolist(), [probs[i] for i in order]


def mrr(ranks) -> float:
    """Mean reciprocal rank; ranks are 1-based."""
    ranks = list(ranks)
    if not ranks:
        raise EvalError("mrr of an empty rank list")
    if any(r < 1 for r in ranks):
        raise EvalError("ranks are 1-based")
    return sum(1.0 / r for r in ranks) / len(ranks)


# ---------------------------------------------------------------- decoding


def _step_logits(model: Model, prefix_rows, encoder_states, enc_pad_mask):
    ids = np.asarray(prefix_rows, dtype=np.int64)
    logits = model.decode(ids, encoder_states, enc_pad_mask=enc_pad_mask)
    out = logits.data[:, -1, :].astype(np.float64)
    out[:, _BANNED_IDS] = -np.inf
    return out


def _encode_source(model: Model, source_ids):
    src, mask = pad_batch([source_ids])
    states, _ = model.encode(src, mask)
    return states, mask


def greedy_decode(model: Model, start_token: int,
                  encoder_states=None, enc_pad_mask=None,
                  max_new_tokens: int = 64, stop_id: int = EOS):
    prefix = [start_token]
    out = []
    for _ in range(max_new_tokens):
        logits = _step_logits(model, [prefix], encoder_states, enc_pad_mask)
        token = int(np.argmax(logits[0]))
        if token == stop_id:
            break
        out.append(token)
        prefix.append(token)
    return out


def _log_softmax(row):
    shifted = row - row.max()
    return shifted - math.log(np.exp(shifted).sum())


def beam_decode(model: Model, start_token: int, encoder_states=None,
                enc_pad_mask=None, max_new_tokens: int = 64,
                beam_size: int = 5, length_norm: float = 1.0,
                stop_id: int = EOS):
    """Length-normalized beam search: finished hypotheses score
    sum(logp) / len**length_norm.  beam_size=1 reproduces greedy exactly."""
    live = [([start_token], 0.0)]
    done = []
    enc_b = encoder_states
    for _ in range(max_new_tokens):
        if not live:
            break
        rows = [seq for seq, _ in live]
        if encoder_states is not None:
            b = len(rows)
            enc_b = T.Tensor(np.broadcast_to(
                encoder_states.data,
                (b,) + encoder_states.data.shape[1:]).copy())
            mask_b = (np.broadcast_to(enc_pad_mask, (b,) +
                                      enc_pad_mask.shape[1:])
                      if enc_pad_mask is not None else None)
        else:
            mask_b = None
        logits = _step_logits(model, rows, enc_b, mask_b)
        candidates = []
        for i, (seq, score) in enumerate(live):
            logp = _log_softmax(logits[i])
            top = np.argsort(-logp, kind="stable")[:beam_size]
            for tok in top:
                candidates.append((score + float(logp[tok]), i, int(tok)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_live = []
        for score, i, tok in candidates[:beam_size]:
            seq = live[i][0] + [tok]
            if tok == stop_id:
                gen_len = len(seq) - 2        # exclude start and stop
                norm = score / max(gen_len, 1) ** length_norm
                done.append((norm, seq[1:-1]))
            else:
                next_live.append((seq, score))
        live = next_live[:beam_size]
        if len(done) >= beam_size:
            break
    for seq, score in live:
        gen_len = len(seq) - 1
        done.append((score / max(gen_len, 1) ** length_norm, seq[1:]))
    if not done:
        return []
    done.sort(key=lambda d: -d[0])
    return done[0][1]


def nucleus_decode(model: Model, start_token: int, rng,
                   encoder_states=None, enc_pad_mask=None,
                   max_new_tokens: int = 64, temperature: float = 1.2,
                   top_p: float = 0.95, stop_id: int = EOS):
    """Sample from the smallest probability mass prefix reaching top_p,
    renormalized, at the given temperature."""
    prefix = [start_token]
    out = []
    for _ in range(max_new_tokens):
        logits = _step_logits(model, [prefix], encoder_states,
                              enc_pad_mask)[0] / temperature
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        cut = int(np.searchsorted(csum, top_p)) + 1
        keep = order[:cut]
        kp = p[keep] / p[keep].sum()
        token = int(keep[rng.choice(len(keep), p=kp)])
        if token == stop_id:
            break
        out.append(token)
        prefix.append(token)
    return out


def _decode_ids(model: Model, source_ids, cfg: GenerationConfig,
                start_token: int, rng=None):
    states, mask = _encode_source(model, source_ids)
    if cfg.method == DecodeMethod.GREEDY:
        return greedy_decode(model, start_token, states, mask,
                             cfg.max_new_tokens)
    if cfg.method == DecodeMethod.BEAM:
        return beam_decode(model, start_token, states, mask,
                           cfg.max_new_tokens, cfg.beam_size,
                           cfg.length_norm)
    rng = rng if rng is not None else np.random.default_rng(0)
    return nucleus_decode(model, start_token, rng, states, mask,
                          cfg.max_new_tokens, cfg.temperature, cfg.top_p)


def assemble_rag_source(text: str, codes, vocab: Vocab,
                        limit: int = _RAG_SOURCE_LIMIT) -> list[int]:
    """[CLS] + text tokens, then [SEP] + code tokens per retrieved snippet
    in rank order, truncated to the source limit."""
    ids = [CLS] + vocab.encode(text).ids
    for code in codes:
        ids.append(SEP)
        ids.extend(vocab.encode(code).ids)
    return ids[:limit]


def generate(model: Model, text: str, vocab: Vocab,
             cfg: GenerationConfig | None = None,
             start_token: int = CDEC, rng=None) -> str:
    cfg = cfg if cfg is not None else GenerationConfig()
    ids = _decode_ids(model, assemble_rag_source(text, [], vocab), cfg,
                      start_token, rng)
    return vocab.decode(ids)


def select_rag_codes(model: Model, index: RetrievalIndex, text: str,
                     vocab: Vocab, top_k: int,
                     exclude_gold: str | None = None) -> list[str]:
    """Top-k retrieved codes in rank order; candidates exactly equal to
    exclude_gold are dropped first (training-mode leak guard)."""
    if top_k == 0:
        return []
    _, _, ranked = retrieve(model, index, text, vocab, k=index.size)
    if exclude_gold is not None:
        ranked = [c for c in ranked if c != exclude_gold]
    return ranked[:top_k]


def rag_generate(model: Model, text: str, vocab: Vocab,
                 index: RetrievalIndex, cfg: GenerationConfig | None = None,
                 start_token: int = CDEC, rng=None,
                 exclude_gold: str | None = None) -> str:
    """Generation with the top rag_top_k retrieved codes spliced after the
    query.  rag_top_k=0 degenerates to plain generation on the same source."""
    cfg = cfg if cfg is not None else GenerationConfig()
    codes = select_rag_codes(model, index, text, vocab, cfg.rag_top_k,
                             exclude_gold)
    ids = _decode_ids(model, assemble_rag_source(text, codes, vocab), cfg,
                      start_token, rng)
    return vocab.decode(ids)


def complete_line(model: Model, prefix: str, vocab: Vocab,
                  max_new_tokens: int = 64) -> str:
    """Greedy decoder-only continuation of prefix, cut at the first newline
    (or [EOS] / token budget)."""
    if model.mode != Mode.DECODER_ONLY:
        raise EvalError("complete_line requires DECODER_ONLY mode")
    prefix_ids = [BOS] + vocab.encode(prefix).ids
    out = []
    for _ in range(max_new_tokens):
        logits = _step_logits(model, [prefix_ids + out], None, None)
        token = int(np.argmax(logits[0]))
        if token == EOS:
            break
        out.append(token)
        text = vocab.decode(out)
        if "\n" in text:
            return text[:text.index("\n")]
    return vocab.decode(out)


# ----------------------------------------------------------------- metrics


def exact_match(pred: str, gold: str) -> float:
    """1.0 when the strings agree after stripping line-end characters."""
    return float(pred.rstrip("\r\n") == gold.rstrip("\r\n"))


def edit_similarity(pred: str, gold: str) -> float:
    """1 - levenshtein / max(len); both empty gives 1."""
    if not pred and not gold:
        return 1.0
    n, m = len(pred), len(gold)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            cost = 0 if pred[i - 1] == gold[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return 1.0 - prev[m] / max(n, m)


def bleu4_smoothed(pred: str, gold: str) -> float:
    """Whitespace-token BLEU over 1..4-grams on the 0-100 scale: add-one
    smoothing whenever an n-gram count is zero, with the standard brevity
    penalty."""
    cand = pred.split()
    ref = gold.split()
    if not cand and not ref:
        return 100.0
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        c_ngrams = Counter(tuple(cand[i:i + n])
                           for i in range(len(cand) - n + 1))
        r_ngrams = Counter(tuple(ref[i:i + n])
                           for i in range(len(ref) - n + 1))
        total = max(sum(c_ngrams.values()), 0)
        matched = sum(min(count, r_ngrams[gram])
                      for gram, count in c_ngrams.items())
        if total == 0 or matched == 0:
            p = (matched + 1) / (total + 1)
        else:
            p = matched / total
        log_p += math.log(p) / 4
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return 100.0 * bp * math.exp(log_p)


# ------------------------------------------------------------ eval drivers


_EVAL_SCHEMAS = {
    "retrieval": ("text", "code"),
    "completion": ("prefix", "gold_line"),
    "generation": ("text", "gold_code"),
}


def read_eval_jsonl(path, kind: str):
    import json
    keys = _EVAL_SCHEMAS[kind]
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EvalError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            if not isinstance(obj, dict) or set(obj) != set(keys):
                raise EvalError(
                    f"{path}:{lineno}: expected exactly keys {sorted(keys)}")
            for key in keys:
                if not isinstance(obj[key], str) or not obj[key]:
                    raise EvalError(
                        f"{path}:{lineno}: {key} must be a non-empty string")
            rows.append(obj)
    if not rows:
        raise EvalError(f"{path}: no usable records")
    return rows


def eval_retrieval(model: Model, rows, vocab: Vocab) -> dict:
    """Rank every query against an index of the rows' own codes; the gold
    id for row i is i."""
    from .data import CorpusRecord
    index = build_index(model, [CorpusRecord(code=r["code"]) for r in rows],
                        vocab)
    ranks = []
    for i, row in enumerate(rows):
        ids, _, _ = retrieve(model, index, row["text"], vocab, k=index.size)
        ranks.append(ids.index(i) + 1)
    return {"mrr": mrr(ranks),
            "top1": sum(r == 1 for r in ranks) / len(ranks)}


def eval_completion(model: Model, rows, vocab: Vocab,
                    max_new_tokens: int = 64) -> dict:
    em, sim = [], []
    for row in rows:
        pred = complete_line(model, row["prefix"], vocab, max_new_tokens)
        em.append(exact_match(pred, row["gold_line"]))
        sim.append(edit_similarity(pred, row["gold_line"]))
    return {"exact_match": 100.0 * sum(em) / len(em),
            "edit_similarity": sum(sim) / len(sim)}


def eval_generation(model: Model, rows, vocab: Vocab,
                    cfg: GenerationConfig | None = None,
                    index: RetrievalIndex | None = None,
                    rng=None) -> dict:
    cfg = cfg if cfg is not None else GenerationConfig()
    em, bleu = [], []
    for row in rows:
        if index is not None:
            pred = rag_generate(model, row["text"], vocab, index, cfg,
                                rng=rng)
        else:
            pred = generate(model, row["text"], vocab, cfg, rng=rng)
        em.append(exact_match(pred, row["gold_code"]))
        bleu.append(bleu4_smoothed(pred, row["gold_code"]))
    return {"exact_match": 100.0 * sum(em) / len(em),
            "bleu4": sum(bleu) / len(bleu)}
