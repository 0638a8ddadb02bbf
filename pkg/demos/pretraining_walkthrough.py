"""
Stage-1 pretraining walkthrough
===============================

Builds a vocabulary over a synthetic code corpus, shows what the three
pretraining tasks feed the model, then runs a short denoising-first
schedule on a small transformer and watches the loss fall.
"""

import numpy as np

from codelm.data import (chunk_corpus, make_seq2seq_clm_example,
                         make_span_denoising_example, splice_denoised,
                         synth_toy_corpus)
from codelm.model import Model
from codelm.tokenizer import train_vocab
from codelm.training import (ModelSection, TrainConfig, build_stage1_pools,
                             evaluate_stage1, train_stage1)

# a toy corpus of one-liner arithmetic functions with docstrings
records = synth_toy_corpus(seed=0, n=24)
print(f"corpus: {len(records)} records, e.g.\n{records[0].code}\n")

vocab = train_vocab(["\n".join([r.text, r.code]) for r in records], 420)
chunks = chunk_corpus(records, vocab, chunk_len=48)
print(f"vocab size {vocab.size}, {len(chunks)} chunks of 48 tokens")

# what span denoising does to a chunk: short spans become sentinels, the
# target lists each sentinel with the tokens it hid
rng = np.random.default_rng(1)
ex = make_span_denoising_example(chunks[0], rng)
print("\ndenoising source:", vocab.decode([t for t in ex.source_ids]))
print("denoising target:", ex.target_ids)
assert splice_denoised(ex.source_ids, ex.target_ids) == chunks[0].ids

# the seq2seq causal variant splits at a pivot instead
ex = make_seq2seq_clm_example(chunks[0], rng)
print(f"\npivot split: {len(ex.source_ids) - 1} source tokens -> "
      f"{len(ex.target_ids)} target tokens")

# a small model is enough to see the schedule work: denoising only during
# the task warmup, then a uniform mixture with the two causal variants
section = ModelSection(d_model=32, n_heads=2, encoder_layers=1,
                       decoder_layers=1, d_ff=64, max_positions=96,
                       d_proj=16)
cfg = TrainConfig(stage="stage1", seed=0, total_steps=240, warmup_steps=24,
                  warmup_task_steps=80, batch_size=8, model=section)
model = Model(section.build(vocab.size))
model, metrics, _ = train_stage1(model, chunks, cfg)

for step in (0, 80, 160, 239):
    row = next(r for r in metrics if r["step"] == step)
    print(f"step {row['step']:>3}  task={row['task']:<14} "
          f"loss={row['loss']:.3f}  lr={row['lr']:.2e}")

losses = evaluate_stage1(model, build_stage1_pools(chunks, cfg))
print("\nfinal mean loss per task:")
for task, loss in losses.items():
    print(f"  {task:<14} {loss:.3f}")
