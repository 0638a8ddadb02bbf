"""codelm command line: vocab/corpus prep, two-stage pretraining, task
finetuning, index building, evaluation, and generation.

Every command accepts --config (JSON), --seed, --output, and repeatable
--set key=value dot-path overrides applied after the file.  Each run ends
with a single-line JSON summary of metrics and artifact paths; all file
writes are atomic.  CODELM_LOG={info,debug} raises log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (DataError, chunk_corpus, read_jsonl, synth_toy_corpus,
                   write_jsonl)
from .evaluation import (EvalError, GenerationConfig, build_index,
                         eval_completion, eval_generation, eval_retrieval,
                         generate, load_index, rag_generate, read_eval_jsonl,
                         save_index)
from .model import CheckpointError, Model, ModelError, load_model, save_model
from .objectives import ObjectiveError
from .tokenizer import Vocab, VocabError, train_vocab
from .training import (FinetuneTask, TrainConfig, TrainError,
                       build_stage1_pools, config_from_dict, evaluate_stage1,
                       finetune, load_train_checkpoint,
                       save_train_checkpoint, train_stage1, train_stage2,
                       write_metrics_jsonl)

log = logging.getLogger("codelm.cli")

_ERRORS = (TrainError, EvalError, VocabError, DataError, ModelError,
           CheckpointError, ObjectiveError, FileNotFoundError)


class CliError(ValueError):
    pass


# ------------------------------------------------------------ config plumbing


def parse_override(expr: str):
    key, sep, raw = expr.partition("=")
    key = key.strip()
    if not sep or not key:
        raise CliError(f"--set expects key=value, got {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(raw: dict, overrides) -> dict:
    for expr in overrides:
        key, value = parse_override(expr)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise CliError(f"{key}: {part} is not a config section")
            node = child
        node[parts[-1]] = value
    return raw


def parse_config(path, overrides, cls=TrainConfig):
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CliError(f"config {path}: root must be a JSON object")
    raw = apply_overrides(raw, overrides)
    return config_from_dict(raw, cls=cls)


def _train_config(args) -> TrainConfig:
    cfg = parse_config(args.config, args.overrides, TrainConfig)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _gen_config(args) -> GenerationConfig:
    return parse_config(args.config, args.overrides, GenerationConfig)


def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _summary(command: str, seed: int, **extra) -> int:
    print(json.dumps({"command": command, "seed": seed, **extra},
                     sort_keys=True))
    return 0


def _read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise CliError(f"{path}:{lineno}: expected a JSON object")
            rows.append(obj)
    if not rows:
        raise CliError(f"{path}: empty dataset")
    return rows


def _load_model_for(args, vocab: Vocab) -> Model:
    return load_model(args.model, expected_vocab_hash=vocab.content_hash())


# ------------------------------------------------------------------ commands


def cmd_train_vocab(args):
    records = read_jsonl(args.corpus)
    texts = [r.code for r in records]
    texts += [r.text for r in records if r.text is not None]
    vocab = train_vocab(texts, args.size)
    out = _outdir(args) / "vocab.txt"
    vocab.save(out)
    log.info("trained vocab of %d tokens", vocab.size)
    return _summary("train-vocab", _seed(args), vocab=str(out),
                    size=vocab.size, vocab_hash=vocab.content_hash())


def cmd_synth_corpus(args):
    records = synth_toy_corpus(seed=_seed(args), n=args.n)
    out = _outdir(args) / "corpus.jsonl"
    write_jsonl(records, out)
    return _summary("synth-corpus", _seed(args), corpus=str(out),
                    records=len(records))


def cmd_train_stage1(args):
    cfg = _train_config(args)
    vocab = Vocab.load(args.vocab)
    records = read_jsonl(args.corpus)
    chunks = chunk_corpus(records, vocab, cfg.chunk_len)
    if args.resume:
        state = load_train_checkpoint(
            args.resume, expected_vocab_hash=vocab.content_hash())
        model = state.model
    else:
        state = None
        model = Model(cfg.model.build(vocab.size), seed=cfg.seed)
    model, metrics, state = train_stage1(model, chunks, cfg, state=state)
    out = _outdir(args)
    save_model(model, out / "model.ckpt", vocab_hash=vocab.content_hash())
    save_train_checkpoint(out / "trainer.ckpt", state,
                          vocab_hash=vocab.content_hash())
    write_metrics_jsonl(out / "metrics.jsonl", metrics)
    losses = evaluate_stage1(model, build_stage1_pools(chunks, cfg),
                             batch_size=cfg.batch_size)
    return _summary("train-stage1", cfg.seed, model=str(out / "model.ckpt"),
                    trainer=str(out / "trainer.ckpt"),
                    metrics=str(out / "metrics.jsonl"),
                    steps=state.step, losses=losses)


def cmd_train_stage2(args):
    cfg = _train_config(args)
    vocab = Vocab.load(args.vocab)
    records = read_jsonl(args.corpus)
    if args.init:
        model = load_model(args.init,
                           expected_vocab_hash=vocab.content_hash())
    else:
        model = Model(cfg.model.build(vocab.size), seed=cfg.seed)
    state = None
    if args.resume:
        state = load_train_checkpoint(
            args.resume, expected_vocab_hash=vocab.content_hash())
    model, metrics, state = train_stage2(model, records, vocab, cfg,
                                         state=state)
    out = _outdir(args)
    save_model(model, out / "model.ckpt", vocab_hash=vocab.content_hash())
    save_train_checkpoint(out / "trainer.ckpt", state,
                          vocab_hash=vocab.content_hash())
    write_metrics_jsonl(out / "metrics.jsonl", metrics)
    last = metrics[-1] if metrics else {}
    return _summary("train-stage2", cfg.seed, model=str(out / "model.ckpt"),
                    trainer=str(out / "trainer.ckpt"),
                    metrics=str(out / "metrics.jsonl"), steps=state.step,
                    losses={k: last[k] for k in
                            ("loss", "tcc", "tcm", "t2c", "c2t")
                            if k in last})


def cmd_finetune(args):
    cfg = _train_config(args)
    vocab = Vocab.load(args.vocab)
    rows = _read_rows(args.data)
    if args.init:
        model = load_model(args.init,
                           expected_vocab_hash=vocab.content_hash())
    else:
        model = Model(cfg.model.build(vocab.size), seed=cfg.seed)
    task = FinetuneTask(args.task)
    model, metrics, _ = finetune(model, rows, task, cfg, vocab)
    out = _outdir(args)
    save_model(model, out / "model.ckpt", vocab_hash=vocab.content_hash())
    write_metrics_jsonl(out / "metrics.jsonl", metrics)
    return _summary("finetune", cfg.seed, task=task.value,
                    model=str(out / "model.ckpt"),
                    metrics=str(out / "metrics.jsonl"),
                    final_loss=metrics[-1]["loss"])


def cmd_build_index(args):
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    records = read_jsonl(args.corpus)
    index = build_index(model, records, vocab)
    out = _outdir(args) / "index.bin"
    save_index(index, out)
    return _summary("build-index", _seed(args), index=str(out),
                    count=index.size, d_proj=index.d_proj)


def cmd_eval_retrieval(args):
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    rows = read_eval_jsonl(args.data, "retrieval")
    metrics = eval_retrieval(model, rows, vocab)
    return _summary("eval-retrieval", _seed(args), queries=len(rows),
                    **metrics)


def cmd_eval_completion(args):
    gen_cfg = _gen_config(args)
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    rows = read_eval_jsonl(args.data, "completion")
    metrics = eval_completion(model, rows, vocab,
                              max_new_tokens=gen_cfg.max_new_tokens)
    return _summary("eval-completion", _seed(args), examples=len(rows),
                    **metrics)


def cmd_eval_generation(args):
    gen_cfg = _gen_config(args)
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    rows = read_eval_jsonl(args.data, "generation")
    index = load_index(args.index) if args.index else None
    rng = np.random.default_rng(_seed(args))
    metrics = eval_generation(model, rows, vocab, gen_cfg, index=index,
                              rng=rng)
    return _summary("eval-generation", _seed(args), examples=len(rows),
                    **metrics)


def cmd_generate(args):
    gen_cfg = _gen_config(args)
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    rng = np.random.default_rng(_seed(args))
    text = generate(model, args.text, vocab, gen_cfg, rng=rng)
    return _summary("generate", _seed(args), method=gen_cfg.method,
                    output=text)


def cmd_rag_generate(args):
    gen_cfg = _gen_config(args)
    vocab = Vocab.load(args.vocab)
    model = _load_model_for(args, vocab)
    index = load_index(args.index)
    rng = np.random.default_rng(_seed(args))
    text = rag_generate(model, args.text, vocab, index, gen_cfg, rng=rng)
    return _summary("rag-generate", _seed(args), method=gen_cfg.method,
                    retrieved=gen_cfg.rag_top_k, output=text)


# -------------------------------------------------------------------- wiring


def _common(sp):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--output", default=".", help="artifact directory")
    sp.add_argument("--set", action="append", default=[], dest="overrides",
                    metavar="KEY=VALUE",
                    help="dot-path config override, applied after --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codelm",
        description="desk-scale encoder-decoder language model for code")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train-vocab", help="learn a byte-level BPE vocab")
    _common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--size", type=int, default=1000)
    sp.set_defaults(handler=cmd_train_vocab)

    sp = sub.add_parser("synth-corpus",
                        help="write the synthetic paired toy corpus")
    _common(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.set_defaults(handler=cmd_synth_corpus)

    sp = sub.add_parser("train-stage1",
                        help="span denoising + two causal LM variants")
    _common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--resume", help="trainer checkpoint to continue from")
    sp.set_defaults(handler=cmd_train_stage1)

    sp = sub.add_parser("train-stage2",
                        help="contrastive + matching + bimodal causal LM")
    _common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--init", help="model checkpoint to start from")
    sp.add_argument("--resume", help="trainer checkpoint to continue from")
    sp.set_defaults(handler=cmd_train_stage2)

    sp = sub.add_parser("finetune", help="task-specific training")
    _common(sp)
    sp.add_argument("--task", required=True,
                    choices=[t.value for t in FinetuneTask])
    sp.add_argument("--data", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--init", help="model checkpoint to start from")
    sp.set_defaults(handler=cmd_finetune)

    sp = sub.add_parser("build-index",
                        help="embed a corpus for retrieval")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(handler=cmd_build_index)

    sp = sub.add_parser("eval-retrieval", help="MRR over a paired dataset")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(handler=cmd_eval_retrieval)

    sp = sub.add_parser("eval-completion",
                        help="line completion exact match / similarity")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(handler=cmd_eval_completion)

    sp = sub.add_parser("eval-generation",
                        help="text-to-code exact match / BLEU")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--index", help="retrieval index for augmentation")
    sp.set_defaults(handler=cmd_eval_generation)

    sp = sub.add_parser("generate", help="decode code from a description")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--text", required=True)
    sp.set_defaults(handler=cmd_generate)

    sp = sub.add_parser("rag-generate",
                        help="decode with retrieved context")
    _common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--text", required=True)
    sp.set_defaults(handler=cmd_rag_generate)

    return parser


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("CODELM_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
