"""Training orchestration: optimizer, LR schedule, the two pretraining
stages, task finetuning, and exact-resume checkpointing.

All entry points are deterministic functions of (initial state, corpus,
config, seed): batches, task choices, and negative mining all draw from a
single per-run generator whose state is checkpointed alongside the
optimizer moments and queues, so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import (DataError, PretrainExample, Task, make_bimodal_example,
                   make_decoder_only_clm_example, make_seq2seq_clm_example,
                   make_span_denoising_example, pad_batch)
from .model import (CheckpointError, Mode, Model, ModelConfig,
                    _decode_blob, _read_archive, _write_archive)
from .objectives import (ContrastiveBatch, EmbeddingQueue, MomentumState,
                         build_matching_batch, clamp_log_tau,
                         contrastive_loss, make_log_tau, matching_loss,
                         momentum_encode, momentum_update, seq2seq_lm_loss,
                         stage2_total_loss)
from .tensor import Tensor
from .tokenizer import CDEC, CLM, CLS, EOS, MATCH, TDEC, Vocab

_FORMAT_VERSION = 1


class TrainError(ValueError):
    pass


@dataclass
class ModelSection:
    """Model hyperparameters as they appear in config files (vocab_size is
    taken from the vocab artifact at run time)."""
    d_model: int = 128
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_ff: int = 256
    max_positions: int = 640
    d_proj: int = 64
    cross_attn_top_L: int = 1

    def build(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **asdict(self))


@dataclass
class TrainConfig:
    stage: str = "stage1"
    seed: int = 0
    total_steps: int = 800
    warmup_steps: int = 80
    warmup_task_steps: int = 250       # stage-1 phase A (denoise only)
    peak_lr: float = 2e-3
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    chunk_len: int = 48
    epochs: int = 3
    mixture: str = "sample"            # "sample" or "sum" task mixing
    checkpoint_every: int = 0          # 0 = final checkpoint only
    max_len_denoise: int = 512
    max_len_seq2seq_src: int = 768
    max_len_seq2seq_tgt: int = 600
    max_len_decoder_tgt: int = 1024
    max_text: int = 128
    max_code: int = 420
    queue_capacity: int = 256          # full scale: 57600
    hard_k: int = 8                    # full scale: 64
    momentum: float = 0.99
    tau_init: float = 0.07
    denoise_rate: float = 0.15
    mean_span: int = 3
    denoise_variants: int = 4          # fixed-pool size per chunk
    pivot_variants: int = 4
    model: ModelSection = field(default_factory=ModelSection)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSection(**self.model)
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        if not 0 <= self.warmup_steps < self.total_steps:
            raise TrainError("need 0 <= warmup_steps < total_steps")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.mixture not in ("sample", "sum"):
            raise TrainError(f"unknown mixture mode {self.mixture!r}")


def config_from_dict(raw: dict, cls=TrainConfig):
    """Strict construction: unknown keys are rejected by name."""
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise TrainError(f"unknown config key(s): {sorted(unknown)}")
    if "model" in raw and isinstance(raw["model"], dict):
        sub_allowed = {f.name for f in fields(ModelSection)}
        sub_unknown = set(raw["model"]) - sub_allowed
        if sub_unknown:
            raise TrainError(
                f"unknown config key(s): "
                f"{sorted('model.' + k for k in sub_unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise TrainError(str(exc)) from exc


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr over warmup_steps, then linear decay to 0
    at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise TrainError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.peak_lr
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / span


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global norm is <= max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               opt: OptimizerState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, wd: float = 0.1,
               no_decay: frozenset = frozenset()):
    """Decoupled-weight-decay Adam with bias correction.

    Only the parameters present in ``grads`` are touched: parameters
    outside the current task's graph neither decay nor accumulate stale
    moments.  Any non-finite gradient aborts before mutating anything.
    """
    b1, b2 = betas
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise TrainError(f"non-finite gradient for {name}; step aborted")
    for name, grad in grads.items():
        param = params[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(param.data, dtype=np.float32)
            opt.v[name] = np.zeros_like(param.data, dtype=np.float32)
            opt.t[name] = 0
        opt.t[name] += 1
        t = opt.t[name]
        if wd != 0.0 and name not in no_decay:
            param.data -= (lr * wd) * param.data
        m, v = opt.m[name], opt.v[name]
        g32 = grad.astype(np.float32, copy=False)
        m *= b1
        m += (1 - b1) * g32
        v *= b2
        v += (1 - b2) * g32 * g32
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(
            param.data.dtype)


def _no_decay_names(names) -> frozenset:
    """Layer-norm gains/shifts, biases, and the temperature never decay."""
    out = set()
    for name in names:
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma", "beta", "b", "b1", "b2") or name == "log_tau":
            out.add(name)
    return frozenset(out)


def _optimize(model: Model, loss: Tensor, opt: OptimizerState, lr: float,
              cfg: TrainConfig, extra_params: dict[str, Tensor] | None = None):
    params = {name: model.params.raw(name)
              for name in model.trainable_names()}
    if extra_params:
        params.update(extra_params)
    T.zero_grads(params.values())
    loss.backward()
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    clip_gradients(grads, cfg.grad_clip)
    adamw_step(params, grads, opt, lr, betas=cfg.betas, eps=cfg.eps,
               wd=cfg.weight_decay, no_decay=_no_decay_names(grads))


# --------------------------------------------------------------- stage one


def _truncate(ids, limit):
    return list(ids)[:limit] if limit else list(ids)


def build_stage1_pools(chunks, cfg: TrainConfig) -> dict[Task, list]:
    """Fixed, seeded example pools per task.  Pools are a pure function of
    (chunks, cfg), so resumed runs rebuild them identically."""
    if not chunks:
        raise TrainError("empty corpus")
    rng = np.random.default_rng([cfg.seed, 101])
    pools: dict[Task, list] = {t: [] for t in
                               (Task.SPAN_DENOISE, Task.SEQ2SEQ_CLM,
                                Task.DECODER_CLM)}
    for chunk in chunks:
        for _ in range(cfg.denoise_variants):
            ex = make_span_denoising_example(chunk, rng, cfg.denoise_rate,
                                             cfg.mean_span)
            pools[Task.SPAN_DENOISE].append(
                (_truncate(ex.source_ids, cfg.max_len_denoise),
                 ex.target_ids))
        for _ in range(cfg.pivot_variants):
            ex = make_seq2seq_clm_example(chunk, rng)
            pools[Task.SEQ2SEQ_CLM].append(
                (_truncate(ex.source_ids, cfg.max_len_seq2seq_src),
                 _truncate(ex.target_ids, cfg.max_len_seq2seq_tgt)))
        ex = make_decoder_only_clm_example(chunk, cfg.max_len_decoder_tgt)
        pools[Task.DECODER_CLM].append((ex.source_ids, ex.target_ids))
    return pools


_STAGE1_TASKS = (Task.SPAN_DENOISE, Task.SEQ2SEQ_CLM, Task.DECODER_CLM)


def _pool_batch(pool, rng, batch_size):
    idx = rng.choice(len(pool), size=batch_size,
                     replace=len(pool) < batch_size)
    sources = [pool[i][0] for i in idx]
    targets = [pool[i][1] for i in idx]
    return sources, targets


def evaluate_stage1(model: Model, pools, batch_size: int = 8) -> dict:
    """Mean per-token loss over each full task pool."""
    out = {}
    for task, pool in pools.items():
        total, count = 0.0, 0
        for start in range(0, len(pool), batch_size):
            part = pool[start:start + batch_size]
            loss = seq2seq_lm_loss(model, [p[0] for p in part],
                                   [p[1] for p in part])
            total += loss.item() * len(part)
            count += len(part)
        out[task.value] = total / count
    return out


@dataclass
class TrainerState:
    model: Model
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0
    log_tau: Tensor | None = None
    queue: EmbeddingQueue | None = None
    momentum: MomentumState | None = None


def _fresh_state(model: Model, cfg: TrainConfig) -> TrainerState:
    return TrainerState(model=model, opt=OptimizerState(),
                        rng=np.random.default_rng([cfg.seed, 202]))


def train_stage1(model: Model, chunks, cfg: TrainConfig,
                 state: TrainerState | None = None,
                 stop_step: int | None = None):
    """Phase A: span denoising only for warmup_task_steps; phase B: one task
    per step, drawn uniformly (or all three summed with mixture="sum").

    Returns (model, metrics, state); pass the state back in to resume.
    stop_step pauses the run early without altering the LR schedule.
    """
    pools = build_stage1_pools(chunks, cfg)
    if state is None:
        state = _fresh_state(model, cfg)
    model = state.model
    metrics = []
    last = cfg.total_steps if stop_step is None else min(stop_step,
                                                         cfg.total_steps)
    for step in range(state.step, last):
        lr = lr_schedule(step, cfg)
        if step < cfg.warmup_task_steps:
            tasks = [Task.SPAN_DENOISE]
        elif cfg.mixture == "sum":
            tasks = list(_STAGE1_TASKS)
        else:
            tasks = [_STAGE1_TASKS[int(state.rng.integers(0, 3))]]
        total = None
        for task in tasks:
            sources, targets = _pool_batch(pools[task], state.rng,
                                           cfg.batch_size)
            loss = seq2seq_lm_loss(model, sources, targets)
            metrics.append({"step": step, "task": task.value,
                            "loss": float(loss.item()), "lr": lr})
            total = loss if total is None else T.add(total, loss)
        _optimize(model, total, state.opt, lr, cfg)
        state.step = step + 1
    return model, metrics, state


# --------------------------------------------------------------- stage two


@dataclass
class _PairExample:
    record_id: int
    text_ids: list[int]        # [CLS] + text, encoder input
    code_ids: list[int]        # [CLS] + code, encoder input
    text_target: list[int]     # text + [EOS], decoder target
    code_target: list[int]     # code + [EOS], decoder target


def build_pair_examples(records, vocab: Vocab, cfg: TrainConfig):
    examples = []
    for i, rec in enumerate(records):
        if rec.text is None:
            raise TrainError("stage-2 requires bimodal records")
        ex = make_bimodal_example(rec.text, rec.code, vocab,
                                  max_code=cfg.max_code,
                                  max_text=cfg.max_text)
        examples.append(_PairExample(
            record_id=i,
            text_ids=ex.text_ids,
            code_ids=ex.code_ids,
            text_target=ex.text_ids[1:] + [EOS],
            code_target=ex.code_ids[1:] + [EOS]))
    return examples


def frame_matching_input(code_ids) -> list[int]:
    """[Match] + code + [EOS]; a leading [CLS] from the encoder framing is
    dropped."""
    ids = list(code_ids)
    if ids and ids[0] == CLS:
        ids = ids[1:]
    return [MATCH] + ids + [EOS]


def _warm_queue(model, examples, state, cfg):
    """Seed the queue with momentum embeddings of the corpus so mining and
    matching negatives exist from the first step."""
    for start in range(0, len(examples), cfg.batch_size):
        part = examples[start:start + cfg.batch_size]
        t_ids, t_mask = pad_batch([ex.text_ids for ex in part])
        c_ids, c_mask = pad_batch([ex.code_ids for ex in part])
        t_emb = momentum_encode(model, state.momentum, t_ids, t_mask)
        c_emb = momentum_encode(model, state.momentum, c_ids, c_mask)
        state.queue.push(t_emb, c_emb,
                         record_ids=[ex.record_id for ex in part],
                         text_tokens=[ex.text_ids for ex in part],
                         code_tokens=[ex.code_ids for ex in part])


def _stage2_step(model, examples, state, cfg):
    idx = state.rng.choice(len(examples), size=cfg.batch_size,
                           replace=len(examples) < cfg.batch_size)
    batch = [examples[int(i)] for i in idx]
    texts = [ex.text_ids for ex in batch]
    codes = [ex.code_ids for ex in batch]

    t_ids, t_mask = pad_batch(texts)
    t_states, t_cls = model.encode(t_ids, t_mask)
    t_emb = model.project_embed(t_cls)
    c_ids, c_mask = pad_batch(codes)
    _, c_cls = model.encode(c_ids, c_mask)
    c_emb = model.project_embed(c_cls)

    t_view = state.queue.text_view()
    c_view = state.queue.code_view()
    l_tcc = contrastive_loss(ContrastiveBatch(
        t_emb, c_emb, state.log_tau, t_view.embeddings, c_view.embeddings,
        batch_ids=[ex.record_id for ex in batch],
        queue_ids=list(t_view.record_ids)))

    tau = float(np.exp(state.log_tau.data))
    pos_pairs = [(ex.record_id, ex.text_ids, ex.code_ids,
                  t_emb.data[j], c_emb.data[j])
                 for j, ex in enumerate(batch)]
    pairs = build_matching_batch(pos_pairs, state.queue, state.rng, tau=tau,
                                 k=cfg.hard_k)
    m_text, m_text_mask = pad_batch([p.text_ids for p in pairs])
    m_states, _ = model.encode(m_text, m_text_mask)
    m_code, _ = pad_batch([frame_matching_input(p.code_ids) for p in pairs])
    logits = model.matching_forward(m_states, m_code,
                                    enc_pad_mask=m_text_mask)
    l_tcm = matching_loss(logits, [p.label for p in pairs])

    l_t2c = seq2seq_lm_loss(model, texts, [ex.code_target for ex in batch],
                            task_token=CDEC)
    l_c2t = seq2seq_lm_loss(model, codes, [ex.text_target for ex in batch],
                            task_token=TDEC)
    parts = {"tcc": l_tcc, "tcm": l_tcm, "t2c": l_t2c, "c2t": l_c2t}
    return stage2_total_loss(parts), parts, batch


def train_stage2(model: Model, records, vocab: Vocab, cfg: TrainConfig,
                 state: TrainerState | None = None,
                 stop_step: int | None = None):
    """Joint four-loss optimization; after each step the momentum encoder is
    interpolated toward the live one and the batch's momentum embeddings are
    queued.  Returns (model, metrics, state)."""
    if len(records) < 2:
        raise TrainError("stage-2 needs at least 2 bimodal records")
    examples = build_pair_examples(records, vocab, cfg)
    if state is None:
        state = _fresh_state(model, cfg)
        state.log_tau = make_log_tau(cfg.tau_init)
        state.momentum = MomentumState.from_model(model, m=cfg.momentum)
        state.queue = EmbeddingQueue(cfg.queue_capacity)
        _warm_queue(model, examples, state, cfg)
    model = state.model
    metrics = []
    last = cfg.total_steps if stop_step is None else min(stop_step,
                                                         cfg.total_steps)
    for step in range(state.step, last):
        lr = lr_schedule(step, cfg)
        total, parts, batch = _stage2_step(model, examples, state, cfg)
        _optimize(model, total, state.opt, lr, cfg,
                  extra_params={"log_tau": state.log_tau})
        clamp_log_tau(state.log_tau)
        momentum_update(model, state.momentum)
        t_ids, t_mask = pad_batch([ex.text_ids for ex in batch])
        c_ids, c_mask = pad_batch([ex.code_ids for ex in batch])
        state.queue.push(
            momentum_encode(model, state.momentum, t_ids, t_mask),
            momentum_encode(model, state.momentum, c_ids, c_mask),
            record_ids=[ex.record_id for ex in batch],
            text_tokens=[ex.text_ids for ex in batch],
            code_tokens=[ex.code_ids for ex in batch])
        metrics.append({
            "step": step, "loss": float(total.item()), "lr": lr,
            "tau": float(np.exp(state.log_tau.data)),
            **{k: float(v.item()) for k, v in parts.items()}})
        state.step = step + 1
    return model, metrics, state


# --------------------------------------------------------------- finetuning


class FinetuneTask(enum.Enum):
    SEQ2SEQ = "seq2seq"
    INSTRUCTION = "instruction"
    COMPLETION_DECODER_ONLY = "completion_decoder_only"
    RETRIEVAL = "retrieval"
    MATCHING = "matching"


_SCHEMAS = {
    FinetuneTask.SEQ2SEQ: ("source", "target"),
    FinetuneTask.INSTRUCTION: ("prompt", "response"),
    FinetuneTask.COMPLETION_DECODER_ONLY: ("code",),
    FinetuneTask.RETRIEVAL: ("text", "code"),
    FinetuneTask.MATCHING: ("text", "code"),
}


def _check_schema(dataset, task):
    keys = _SCHEMAS[task]
    for i, rec in enumerate(dataset):
        missing = [k for k in keys if k not in rec or not isinstance(
            rec[k], str) or not rec[k]]
        if missing:
            raise TrainError(
                f"record {i} lacks {missing} required by {task.value}")


def _epoch_batches(n, batch_size, epochs, rng):
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def finetune(model: Model, dataset, task: FinetuneTask, cfg: TrainConfig,
             vocab: Vocab, state: TrainerState | None = None):
    """Task-specific seq2seq/decoder-only/contrastive/matching training for
    cfg.epochs passes over the dataset."""
    if isinstance(task, str):
        task = FinetuneTask(task)
    if not dataset:
        raise TrainError("empty finetune dataset")
    _check_schema(dataset, task)
    if state is None:
        state = _fresh_state(model, cfg)
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    schedule_cfg = TrainConfig(
        total_steps=max(total_steps, 1),
        warmup_steps=min(cfg.warmup_steps, max(total_steps // 10, 0)),
        peak_lr=cfg.peak_lr, seed=cfg.seed)
    metrics = []

    if task in (FinetuneTask.SEQ2SEQ, FinetuneTask.INSTRUCTION):
        src_key, tgt_key = _SCHEMAS[task]
        pairs = [([CLS] + vocab.encode(r[src_key]).ids,
                  vocab.encode(r[tgt_key]).ids + [EOS]) for r in dataset]
        for step, idx in enumerate(_epoch_batches(
                len(pairs), cfg.batch_size, cfg.epochs, state.rng)):
            lr = lr_schedule(min(step, total_steps), schedule_cfg)
            loss = seq2seq_lm_loss(model,
                                   [pairs[i][0] for i in idx],
                                   [pairs[i][1] for i in idx])
            _optimize(model, loss, state.opt, lr, cfg)
            metrics.append({"step": step, "task": task.value,
                            "loss": float(loss.item()), "lr": lr})
        return model, metrics, state

    if task == FinetuneTask.COMPLETION_DECODER_ONLY:
        model.set_mode(Mode.DECODER_ONLY)
        targets = [vocab.encode(r["code"]).ids[:cfg.max_len_decoder_tgt]
                   + [EOS] for r in dataset]
        for step, idx in enumerate(_epoch_batches(
                len(targets), cfg.batch_size, cfg.epochs, state.rng)):
            lr = lr_schedule(min(step, total_steps), schedule_cfg)
            loss = seq2seq_lm_loss(model, [[CLM]] * len(idx),
                                   [targets[i] for i in idx])
            _optimize(model, loss, state.opt, lr, cfg)
            metrics.append({"step": step, "task": task.value,
                            "loss": float(loss.item()), "lr": lr})
        return model, metrics, state

    # RETRIEVAL / MATCHING reuse the stage-2 machinery on labeled pairs
    from .data import CorpusRecord
    records = [CorpusRecord(code=r["code"], text=r["text"]) for r in dataset]
    examples = build_pair_examples(records, vocab, cfg)
    if state.log_tau is None:
        state.log_tau = make_log_tau(cfg.tau_init)
        state.momentum = MomentumState.from_model(model, m=cfg.momentum)
        state.queue = EmbeddingQueue(cfg.queue_capacity)
        _warm_queue(model, examples, state, cfg)
    for step, idx in enumerate(_epoch_batches(
            len(examples), cfg.batch_size, cfg.epochs, state.rng)):
        lr = lr_schedule(min(step, total_steps), schedule_cfg)
        batch = [examples[int(i)] for i in idx]
        t_ids, t_mask = pad_batch([ex.text_ids for ex in batch])
        t_states, t_cls = model.encode(t_ids, t_mask)
        t_emb = model.project_embed(t_cls)
        c_ids, c_mask = pad_batch([ex.code_ids for ex in batch])
        _, c_cls = model.encode(c_ids, c_mask)
        c_emb = model.project_embed(c_cls)
        if task == FinetuneTask.RETRIEVAL:
            t_view = state.queue.text_view()
            loss = contrastive_loss(ContrastiveBatch(
                t_emb, c_emb, state.log_tau,
                t_view.embeddings, state.queue.code_view().embeddings,
                batch_ids=[ex.record_id for ex in batch],
                queue_ids=list(t_view.record_ids)))
        else:
            tau = float(np.exp(state.log_tau.data))
            pos = [(ex.record_id, ex.text_ids, ex.code_ids,
                    t_emb.data[j], c_emb.data[j])
                   for j, ex in enumerate(batch)]
            pairs = build_matching_batch(pos, state.queue, state.rng,
                                         tau=tau, k=cfg.hard_k)
            m_text, m_mask = pad_batch([p.text_ids for p in pairs])
            m_states, _ = model.encode(m_text, m_mask)
            m_code, _ = pad_batch(
                [frame_matching_input(p.code_ids) for p in pairs])
            logits = model.matching_forward(m_states, m_code,
                                            enc_pad_mask=m_mask)
            loss = matching_loss(logits, [p.label for p in pairs])
        _optimize(model, loss, state.opt, lr, cfg,
                  extra_params={"log_tau": state.log_tau})
        clamp_log_tau(state.log_tau)
        momentum_update(model, state.momentum)
        state.queue.push(
            momentum_encode(model, state.momentum, t_ids, t_mask),
            momentum_encode(model, state.momentum, c_ids, c_mask),
            record_ids=[ex.record_id for ex in batch],
            text_tokens=[ex.text_ids for ex in batch],
            code_tokens=[ex.code_ids for ex in batch])
        metrics.append({"step": step, "task": task.value,
                        "loss": float(loss.item()), "lr": lr})
    return model, metrics, state


def write_metrics_jsonl(path, metrics):
    """One JSON object per line, written atomically."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ------------------------------------------------------------ checkpointing


def save_train_checkpoint(path, state: TrainerState, vocab_hash: str = ""):
    model = state.model
    arrays = {f"param.{n}": model.params.raw(n).data
              for n in model.params.names()}
    for name, arr in state.opt.m.items():
        arrays[f"opt.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        arrays[f"opt.v.{name}"] = arr
    manifest = {
        "format_version": _FORMAT_VERSION,
        "kind": "trainer",
        "config": asdict(model.config),
        "mode": model.mode.value,
        "trainable": model.trainable,
        "vocab_hash": vocab_hash,
        "step": state.step,
        "opt_t": state.opt.t,
        "rng_state": state.rng.bit_generator.state,
        "tensors": {},
    }
    if state.log_tau is not None:
        arrays["extra.log_tau"] = state.log_tau.data
    if state.momentum is not None:
        manifest["momentum_m"] = state.momentum.m
        for name, arr in state.momentum.params.items():
            arrays[f"momentum.{name}"] = arr
    if state.queue is not None:
        qstate = state.queue.state_dict()
        manifest["queue"] = {
            "capacity": qstate["capacity"],
            "record_ids": qstate["text"]["record_ids"],
            "text_tokens": qstate["text"]["tokens"],
            "code_tokens": qstate["code"]["tokens"],
        }
        arrays["queue.text_embs"] = qstate["text"]["embeddings"]
        arrays["queue.code_embs"] = qstate["code"]["embeddings"]
    manifest["tensors"] = {
        name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in arrays.items()}
    _write_archive(path, manifest, arrays)


def load_train_checkpoint(path, expected_vocab_hash: str | None = None
                          ) -> TrainerState:
    manifest, blobs = _read_archive(path)
    if manifest.get("kind") != "trainer":
        raise CheckpointError("not a trainer checkpoint")
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError("unsupported format_version")
    if (expected_vocab_hash is not None
            and manifest["vocab_hash"] != expected_vocab_hash):
        raise CheckpointError("vocab hash mismatch")

    def load_tensor(name):
        return _decode_blob(blobs[name], manifest["tensors"][name], name)

    cfg = ModelConfig(**manifest["config"])
    model = Model(cfg, seed=0)
    for name in model.params.names():
        key = f"param.{name}"
        if key not in blobs:
            raise CheckpointError(f"missing tensor {key}")
        arr = load_tensor(key)
        if arr.shape != model.params.raw(name).data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        model.params.raw(name).data = arr
    model.dtype = np.dtype(
        manifest["tensors"][f"param.{model.params.names()[0]}"]["dtype"])
    model.set_trainable(manifest["trainable"])
    mode = Mode(manifest["mode"])
    if mode == Mode.DECODER_ONLY:
        model._flag_snapshot = dict(model.trainable)
        model._clm_cache = model._constant_clm_states()
    model.mode = mode

    opt = OptimizerState(t={k: int(v) for k, v in manifest["opt_t"].items()})
    for name in manifest["tensors"]:
        if name.startswith("opt.m."):
            opt.m[name[len("opt.m."):]] = load_tensor(name)
        elif name.startswith("opt.v."):
            opt.v[name[len("opt.v."):]] = load_tensor(name)

    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainerState(model=model, opt=opt, rng=rng,
                         step=int(manifest["step"]))
    if "extra.log_tau" in manifest["tensors"]:
        state.log_tau = Tensor(load_tensor("extra.log_tau"),
                               requires_grad=True)
    if "momentum_m" in manifest:
        params = {name[len("momentum."):]: load_tensor(name)
                  for name in manifest["tensors"]
                  if name.startswith("momentum.")}
        state.momentum = MomentumState(params=params,
                                       m=manifest["momentum_m"])
    if "queue" in manifest:
        qmeta = manifest["queue"]
        state.queue = EmbeddingQueue.from_state_dict({
            "capacity": qmeta["capacity"],
            "text": {"embeddings": load_tensor("queue.text_embs"),
                     "record_ids": qmeta["record_ids"],
                     "tokens": qmeta["text_tokens"]},
            "code": {"embeddings": load_tensor("queue.code_embs"),
                     "record_ids": qmeta["record_ids"],
                     "tokens": qmeta["code_tokens"]},
        })
    return state
