"""Byte-level BPE tokenizer with a fixed special-token registry.

Special tokens occupy the lowest ids in a fixed order, the 256 raw byte
tokens come next, and learned merges fill the rest.  Specials are injected
only programmatically: encoding raw text can never produce them, so no
escaping scheme is needed for user content.
"""

from __future__ import annotations

import hashlib
import os
import re
from collections import Counter
from dataclasses import dataclass, field

SPECIAL_NAMES = [
    "[PAD]", "[BOS]", "[EOS]", "[CLS]", "[CLM]",
    "[Match]", "[CDec]", "[TDec]", "[SEP]",
] + [f"[MASK{i}]" for i in range(100)]

PAD, BOS, EOS, CLS, CLM, MATCH, CDEC, TDEC, SEP = range(9)
N_SPECIALS = len(SPECIAL_NAMES)          # 109
BYTE_BASE = N_SPECIALS                   # ids 109..364 are single bytes
FIRST_MERGE_ID = BYTE_BASE + 256         # 365

_SPECIAL_BYTES = {name.encode("ascii") for name in SPECIAL_NAMES}
_SPECIAL_IDS = {name: i for i, name in enumerate(SPECIAL_NAMES)}

# ASCII whitespace, matching re's byte-level \s class
_WHITESPACE = frozenset(b" \t\n\r\x0b\x0c")
_SEGMENT_RE = re.compile(rb"\s+|\S+")

_MAGIC = "codelm-vocab-v1"


def mask_id(i: int) -> int:
    """Id of the i-th span sentinel [MASKi]."""
    if not 0 <= i < 100:
        raise ValueError(f"sentinel index out of range: {i}")
    return 9 + i


class VocabError(ValueError):
    pass


@dataclass
class TokenSequence:
    """Token ids paired with word-start flags for whole-word masking."""

    ids: list[int] = field(default_factory=list)
    word_start: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.word_start):
            raise VocabError("ids and word_start lengths differ")

    def __len__(self):
        return len(self.ids)


def _to_bytes(text) -> bytes:
    if isinstance(text, bytes):
        return text
    # surrogateescape keeps the byte round-trip total even for lone surrogates
    return text.encode("utf-8", "surrogateescape")


class Vocab:
    """Immutable after construction; encode/decode are pure."""

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self.merges = list(merges)
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._token_bytes = [bytes([b]) for b in range(256)]
        for left, right in self.merges:
            self._token_bytes.append(left + right)
        self._bytes_to_id = {}
        for i, tok in enumerate(self._token_bytes):
            if tok in _SPECIAL_BYTES:
                raise VocabError(f"token collides with special name: {tok!r}")
            self._bytes_to_id.setdefault(tok, BYTE_BASE + i)
        self._segment_cache: dict[bytes, list[bytes]] = {}

    @property
    def size(self) -> int:
        return BYTE_BASE + len(self._token_bytes)

    def token_bytes(self, token_id: int) -> bytes:
        if not BYTE_BASE <= token_id < self.size:
            raise VocabError(f"not a regular token id: {token_id}")
        return self._token_bytes[token_id - BYTE_BASE]

    def _merge_segment(self, seg: bytes) -> list[bytes]:
        cached = self._segment_cache.get(seg)
        if cached is not None:
            return cached
        parts = [seg[i:i + 1] for i in range(len(seg))]
        while len(parts) > 1:
            best_rank, best = None, None
            for pair in zip(parts, parts[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best = rank, pair
            if best is None:
                break
            merged = best[0] + best[1]
            out, i = [], 0
            while i < len(parts):
                if (i + 1 < len(parts) and parts[i] == best[0]
                        and parts[i + 1] == best[1]):
                    out.append(merged)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        self._segment_cache[seg] = parts
        return parts

    def encode(self, text) -> TokenSequence:
        data = _to_bytes(text)
        ids, starts = [], []
        for match in _SEGMENT_RE.finditer(data):
            offset = match.start()
            for part in self._merge_segment(match.group()):
                ids.append(self._bytes_to_id[part])
                starts.append(offset == 0 or data[offset - 1] in _WHITESPACE)
                offset += len(part)
        return TokenSequence(ids, starts)

    def decode(self, ids) -> str:
        pieces, buf = [], bytearray()
        for token_id in ids:
            token_id = int(token_id)
            if 0 <= token_id < N_SPECIALS:
                if buf:
                    pieces.append(buf.decode("utf-8", "surrogateescape"))
                    buf = bytearray()
                pieces.append(SPECIAL_NAMES[token_id])
            elif BYTE_BASE <= token_id < self.size:
                buf.extend(self._token_bytes[token_id - BYTE_BASE])
            else:
                raise VocabError(f"token id out of range: {token_id}")
        if buf:
            pieces.append(buf.decode("utf-8", "surrogateescape"))
        return "".join(pieces)

    def serialize(self) -> str:
        lines = [_MAGIC, f"merges {len(self.merges)}"]
        for left, right in self.merges:
            lines.append(f"{left.hex()} {right.hex()}")
        lines.append(f"tokens {len(self._token_bytes)}")
        lines.extend(tok.hex() for tok in self._token_bytes)
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("ascii")).hexdigest()

    def save(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != _MAGIC:
            raise VocabError("not a vocab file")
        try:
            n_merges = int(lines[1].split()[1])
            merges = []
            for line in lines[2:2 + n_merges]:
                left, right = line.split()
                merges.append((bytes.fromhex(left), bytes.fromhex(right)))
            header = lines[2 + n_merges].split()
            n_tokens = int(header[1])
            tokens = [bytes.fromhex(t)
                      for t in lines[3 + n_merges:3 + n_merges + n_tokens]]
        except (IndexError, ValueError) as exc:
            raise VocabError(f"malformed vocab file: {exc}") from exc
        vocab = cls(merges)
        if tokens != vocab._token_bytes:
            raise VocabError("token list inconsistent with merges")
        return vocab


def train_vocab(texts, target_size: int) -> Vocab:
    """Learn a byte-level BPE vocab of exactly target_size ids (or fewer if
    the corpus runs out of mergeable pairs).

    Merges are chosen greedily by pair frequency; ties break on the
    lexicographically smallest (left, right) byte pair, so identical corpora
    always yield identical vocabs.  Merges never cross whitespace/word
    segment boundaries.
    """
    if target_size < FIRST_MERGE_ID:
        raise VocabError(
            f"target_size must be >= {FIRST_MERGE_ID} "
            "(specials + 256 byte tokens)")
    segment_counts: Counter = Counter()
    total = 0
    for text in texts:
        data = _to_bytes(text)
        total += len(data)
        for match in _SEGMENT_RE.finditer(data):
            seg = match.group()
            segment_counts[tuple(seg[i:i + 1] for i in range(len(seg)))] += 1
    if total == 0:
        raise VocabError("empty corpus")

    merges: list[tuple[bytes, bytes]] = []
    work = dict(segment_counts)
    for _ in range(target_size - FIRST_MERGE_ID):
        pair_counts: Counter = Counter()
        for seg, cnt in work.items():
            for pair in zip(seg, seg[1:]):
                pair_counts[pair] += cnt
        best = None
        for pair, _ in sorted(pair_counts.items(),
                              key=lambda kv: (-kv[1], kv[0])):
            if pair[0] + pair[1] not in _SPECIAL_BYTES:
                best = pair
                break
        if best is None:
            break
        merges.append(best)
        merged = best[0] + best[1]
        new_work: dict = {}
        for seg, cnt in work.items():
            out, i = [], 0
            while i < len(seg):
                if (i + 1 < len(seg) and seg[i] == best[0]
                        and seg[i + 1] == best[1]):
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            key = tuple(out)
            new_work[key] = new_work.get(key, 0) + cnt
        work = new_work
    return Vocab(merges)
