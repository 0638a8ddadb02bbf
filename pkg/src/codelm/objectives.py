"""Pretraining objectives: contrastive, matching, and LM losses, plus the
momentum encoder and the FIFO embedding queues that feed negatives.

The contrastive temperature is learned as log(tau) and clamped back into
[0.01, 1] by the optimizer projection after each step.  Queue entries are
plain arrays: gradients never flow into queued negatives or the momentum
parameters.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import pad_batch
from .model import Model
from .tensor import MASK_VALUE, Tensor
from .tokenizer import BOS, PAD

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0
MOMENTUM_DEFAULT = 0.99
_NORM_ATOL = 1e-5


class ObjectiveError(ValueError):
    pass


def make_log_tau(tau: float = TAU_INIT) -> Tensor:
    if not TAU_MIN <= tau <= TAU_MAX:
        raise ObjectiveError(f"tau init {tau} outside [{TAU_MIN}, {TAU_MAX}]")
    return Tensor(np.array(math.log(tau), dtype=np.float32),
                  requires_grad=True)


def clamp_log_tau(log_tau: Tensor):
    """Project the learned temperature back into its valid range."""
    log_tau.data = np.clip(log_tau.data, math.log(TAU_MIN),
                           math.log(TAU_MAX)).astype(log_tau.data.dtype)


# ----------------------------------------------------------------- queues


@dataclass
class QueueView:
    """One side of the queue, snapshotted for mining/negatives."""
    embeddings: np.ndarray          # Q x d
    record_ids: list
    tokens: list


class EmbeddingQueue:
    """Paired FIFO stores of unit-norm text/code embeddings.

    Entries optionally carry the originating record id and token ids so the
    matching batch can place real negative content and exclude positives.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ObjectiveError("capacity must be >= 1")
        self.capacity = capacity
        self._text: deque = deque(maxlen=capacity)
        self._code: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._text)

    def push(self, text_embs, code_embs, record_ids=None,
             text_tokens=None, code_tokens=None):
        text_embs = np.asarray(text_embs)
        code_embs = np.asarray(code_embs)
        if text_embs.shape != code_embs.shape:
            raise ObjectiveError("text/code batches differ in shape")
        norms = np.linalg.norm(text_embs, axis=-1)
        norms_c = np.linalg.norm(code_embs, axis=-1)
        if (np.abs(norms - 1) > _NORM_ATOL).any() or \
                (np.abs(norms_c - 1) > _NORM_ATOL).any():
            raise ObjectiveError("queued embeddings must be unit-norm")
        n = len(text_embs)
        record_ids = record_ids if record_ids is not None else [None] * n
        text_tokens = text_tokens if text_tokens is not None else [None] * n
        code_tokens = code_tokens if code_tokens is not None else [None] * n
        for i in range(n):
            self._text.append((text_embs[i].copy(), record_ids[i],
                               text_tokens[i]))
            self._code.append((code_embs[i].copy(), record_ids[i],
                               code_tokens[i]))

    def _view(self, store) -> QueueView:
        if not store:
            raise ObjectiveError("queue is empty")
        return QueueView(np.stack([e[0] for e in store]),
                         [e[1] for e in store],
                         [e[2] for e in store])

    def text_view(self) -> QueueView:
        return self._view(self._text)

    def code_view(self) -> QueueView:
        return self._view(self._code)

    def state_dict(self) -> dict:
        def side(store):
            return {
                "embeddings": (np.stack([e[0] for e in store])
                               if store else np.zeros((0, 0), np.float32)),
                "record_ids": [e[1] for e in store],
                "tokens": [list(e[2]) if e[2] is not None else None
                           for e in store],
            }
        return {"capacity": self.capacity,
                "text": side(self._text), "code": side(self._code)}

    @classmethod
    def from_state_dict(cls, state) -> "EmbeddingQueue":
        queue = cls(state["capacity"])
        for tside, cside in zip(
                zip(state["text"]["embeddings"], state["text"]["record_ids"],
                    state["text"]["tokens"]),
                zip(state["code"]["embeddings"], state["code"]["record_ids"],
                    state["code"]["tokens"])):
            queue._text.append((np.asarray(tside[0]), tside[1], tside[2]))
            queue._code.append((np.asarray(cside[0]), cside[1], cside[2]))
        return queue


def queue_push(queue: EmbeddingQueue, text_batch, code_batch, **meta):
    queue.push(text_batch, code_batch, **meta)
    return queue


# ------------------------------------------------------- momentum encoder


@dataclass
class MomentumState:
    params: dict[str, np.ndarray]
    m: float = MOMENTUM_DEFAULT

    @classmethod
    def from_model(cls, model: Model, m: float = MOMENTUM_DEFAULT):
        params = {name: model.params.raw(name).data.copy()
                  for name in model.params.names()
                  if name.startswith(("enc.", "proj."))}
        return cls(params=params, m=m)

    def state_dict(self):
        return {"m": self.m, "params": self.params}


def momentum_update(model: Model, state: MomentumState) -> MomentumState:
    """theta_m <- m * theta_m + (1 - m) * theta, elementwise."""
    for name, arr in state.params.items():
        live = model.params.raw(name).data
        if live.shape != arr.shape:
            raise ObjectiveError(f"shape mismatch for {name}")
        arr *= state.m
        arr += (1.0 - state.m) * live
    return state


def momentum_encode(model: Model, state: MomentumState, tokens,
                    pad_mask=None) -> np.ndarray:
    """Unit-norm embeddings from the momentum parameters; detached."""
    saved = {}
    try:
        for name, arr in state.params.items():
            tensor = model.params.raw(name)
            saved[name] = tensor.data
            tensor.data = arr
        _, cls_hidden = model.encode(tokens, pad_mask)
        return model.project_embed(cls_hidden).data.copy()
    finally:
        for name, arr in saved.items():
            model.params.raw(name).data = arr


# -------------------------------------------------------- contrastive loss


@dataclass
class ContrastiveBatch:
    text: Tensor                    # B x d, unit-norm, gradient-carrying
    code: Tensor                    # B x d
    log_tau: Tensor                 # scalar
    queue_text: np.ndarray | None = None   # Q x d constants
    queue_code: np.ndarray | None = None
    # optional record ids; queue entries sharing an id with the in-batch
    # positive are masked out as false negatives (no effect when absent)
    batch_ids: list | None = None
    queue_ids: list | None = None


def _with_queue(live: Tensor, queued) -> Tensor:
    if queued is None or len(queued) == 0:
        return live
    extra = Tensor(np.asarray(queued, dtype=live.data.dtype))
    return T.concat([live, extra], axis=0)


def _false_negative_mask(batch_ids, queue_ids, n, q):
    """(n, n+q) additive mask: large negative where a queue candidate has
    the same record id as the row's positive; exp underflows to exactly 0."""
    if batch_ids is None or queue_ids is None or q == 0:
        return None
    mask = np.zeros((n, n + q))
    for i, rid in enumerate(batch_ids):
        for j, qid in enumerate(queue_ids):
            if qid is not None and qid == rid:
                mask[i, n + j] = MASK_VALUE
    return mask if mask.any() else None


def _info_nce(queries: Tensor, candidates: Tensor, inv_tau: Tensor,
              mask=None) -> Tensor:
    n = queries.data.shape[0]
    scores = T.matmul(queries, T.transpose(candidates, (1, 0)))
    logits = T.mul(scores, inv_tau)
    if mask is not None:
        logits = T.add(logits, Tensor(mask.astype(logits.data.dtype)))
    k = logits.data.shape[1]
    return T.cross_entropy_logits(
        T.reshape(logits, (n, 1, k)), np.arange(n).reshape(n, 1))


def contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """Symmetric InfoNCE over in-batch candidates plus queued negatives.

    The i-th text matches the i-th code; queue entries extend the candidate
    set in both directions but receive no gradient.  When record ids are
    provided, queued copies of an in-batch record are excluded: on a small
    corpus the queue quickly fills with embeddings of the very records
    being trained on, and those duplicates otherwise impose an irreducible
    loss floor.
    """
    n = batch.text.data.shape[0]
    q = 0 if batch.queue_text is None else len(batch.queue_text)
    if n < 2 and q == 0:
        raise ObjectiveError("need at least 2 pairs or a non-empty queue")
    inv_tau = T.exp(T.scale(batch.log_tau, -1.0))
    cand_code = _with_queue(batch.code, batch.queue_code)
    cand_text = _with_queue(batch.text, batch.queue_text)
    mask = _false_negative_mask(batch.batch_ids, batch.queue_ids, n, q)
    t2c = _info_nce(batch.text, cand_code, inv_tau, mask)
    c2t = _info_nce(batch.code, cand_text, inv_tau, mask)
    return T.scale(T.add(t2c, c2t), 0.5)


# -------------------------------------------------------- negative mining


def mine_hard_negatives(query_emb, candidates: QueueView, k: int,
                        exclude_ids=(), tau: float = TAU_INIT,
                        rng=None) -> list[int]:
    """Sample k queue indices without replacement, weighted by
    exp(similarity / tau).  Candidates whose record id is excluded are never
    returned.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    query = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    exclude = set(exclude_ids)
    keep = [i for i, rid in enumerate(candidates.record_ids)
            if rid not in exclude]
    if len(keep) < k:
        raise ObjectiveError(
            f"only {len(keep)} candidates after exclusion, need {k}")
    sims = candidates.embeddings[keep].astype(np.float64) @ query
    weights = np.exp((sims - sims.max()) / tau)
    weights /= weights.sum()
    chosen = rng.choice(len(keep), size=k, replace=False, p=weights)
    return [keep[int(i)] for i in chosen]


# ------------------------------------------------------- matching batch


@dataclass
class MatchingPair:
    text_ids: list[int]
    code_ids: list[int]
    label: int


def build_matching_batch(pos_pairs, queue: EmbeddingQueue, rng,
                         tau: float = TAU_INIT,
                         k: int = 1) -> list[MatchingPair]:
    """N positives, N (text, mined negative code), N (mined negative text,
    code); 3N pairs total, 1:2 positive:negative.

    pos_pairs entries: (record_id, text_ids, code_ids, text_emb, code_emb).
    Each anchor mines k similarity-weighted candidates and keeps one of them
    uniformly at random, so larger k trades per-pair hardness for coverage
    of distinct negatives.
    """
    if not pos_pairs:
        raise ObjectiveError("need at least one positive pair")
    code_view = queue.code_view()
    text_view = queue.text_view()

    def pick(emb, view, rid):
        avail = sum(1 for r in view.record_ids if r != rid)
        mined = mine_hard_negatives(emb, view, max(1, min(k, avail)),
                                    exclude_ids=[rid], tau=tau, rng=rng)
        return mined[int(rng.integers(len(mined)))]

    out = [MatchingPair(list(t), list(c), 1) for _, t, c, _, _ in pos_pairs]
    for rid, text_ids, _, text_emb, _ in pos_pairs:
        idx = pick(text_emb, code_view, rid)
        out.append(MatchingPair(list(text_ids),
                                list(code_view.tokens[idx]), 0))
    for rid, _, code_ids, _, code_emb in pos_pairs:
        idx = pick(code_emb, text_view, rid)
        out.append(MatchingPair(list(text_view.tokens[idx]),
                                list(code_ids), 0))
    return out


def matching_loss(two_class_logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise ObjectiveError("labels must be 0 or 1")
    n = two_class_logits.data.shape[0]
    return T.cross_entropy_logits(
        T.reshape(two_class_logits, (n, 1, 2)), labels.reshape(n, 1))


# ------------------------------------------------------------- LM losses


def seq2seq_lm_loss(model: Model, sources, targets,
                    task_token: int | None = None) -> Tensor:
    """Teacher-forced cross-entropy of targets given encoded sources.

    Decoder input is the task token (default [BOS]) followed by the target
    shifted right; pad positions are ignored in the loss.
    """
    targets = [list(t) for t in targets]
    if any(len(t) == 0 for t in targets):
        raise ObjectiveError("empty target sequence")
    task = BOS if task_token is None else task_token
    src_ids, src_mask = pad_batch(sources)
    states, _ = model.encode(src_ids, src_mask)
    tgt_ids, _ = pad_batch(targets)
    dec_in = np.concatenate(
        [np.full((tgt_ids.shape[0], 1), task, dtype=np.int64),
         tgt_ids[:, :-1]], axis=1)
    logits = model.decode(dec_in, states, enc_pad_mask=src_mask)
    return T.cross_entropy_logits(logits, tgt_ids, ignore_id=PAD)


def stage2_total_loss(components: dict[str, Tensor]) -> Tensor:
    """Unweighted sum of the four second-stage losses."""
    required = ("tcc", "tcm", "t2c", "c2t")
    missing = [k for k in required if k not in components]
    if missing:
        raise ObjectiveError(f"missing loss components: {missing}")
    total = None
    for key in required:
        value = components[key]
        if not np.isfinite(value.data).all():
            raise ObjectiveError(f"loss component {key} is not finite")
        total = value if total is None else T.add(total, value)
    return total
