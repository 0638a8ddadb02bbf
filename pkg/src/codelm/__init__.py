"""codelm: a desk-scale encoder-decoder language model toolkit for code.

Numpy-backed building blocks for pretraining a small flexible
encoder-decoder model on code (span denoising plus two causal-LM
variants, then joint contrastive / matching / bimodal causal-LM
training), and for using it afterwards: dense retrieval, matching
rerank, line completion, text-to-code generation, and
retrieval-augmented generation.
"""

__version__ = "0.1.0"

from . import (data, evaluation, model, objectives, tensor, tokenizer,
               training)

__all__ = ["data", "evaluation", "model", "objectives", "tensor",
           "tokenizer", "training", "__version__"]
