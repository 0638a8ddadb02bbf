"""
Decoder-only line completion
============================

Switches a model into decoder-only mode (encoder and cross-attention
frozen, constant encoder pass cached), finetunes it on whole snippets,
and asks it to finish lines.  A byte-level vocabulary keeps prefix
tokenizations stable across the newline boundary.
"""

from codelm.evaluation import complete_line, eval_completion
from codelm.model import Mode, Model
from codelm.tokenizer import train_vocab
from codelm.training import ModelSection, TrainConfig, finetune

snippets = [
    "width = 12\narea = width * width",
    "name = 'ada'\nprint(name.upper())",
    "total = 0\ntotal += 7",
    "items = [1, 2, 3]\nitems.append(4)",
    "x = 9\ny = x - 5",
    "msg = 'hi'\nprint(msg * 2)",
]
vocab = train_vocab(snippets, 365)     # specials + raw bytes, no merges

section = ModelSection(d_model=48, n_heads=2, encoder_layers=1,
                       decoder_layers=2, d_ff=96, max_positions=128,
                       d_proj=24)
model = Model(section.build(vocab.size))

# one batch per epoch at this size; the mode switch happens inside
cfg = TrainConfig(seed=1, epochs=250, batch_size=6, model=section)
model, metrics, _ = finetune(model, [{"code": s} for s in snippets],
                             "completion_decoder_only", cfg, vocab)
print(f"mode {model.mode.name}, final loss {metrics[-1]['loss']:.3f} "
      f"after {len(metrics)} steps")
assert model.mode == Mode.DECODER_ONLY

for snippet in snippets[:3]:
    first, gold = snippet.split("\n")
    got = complete_line(model, first + "\n", vocab)
    flag = "ok " if got == gold else "MISS"
    print(f"[{flag}] {first!r} -> {got!r}")

rows = [{"prefix": s.split("\n")[0] + "\n", "gold_line": s.split("\n")[1]}
        for s in snippets]
print("held-in scores:", eval_completion(model, rows, vocab))
