"""Desk-scale laboratory for annotation-anchored language-model training.

The package covers the full loop on a synthetic story world with exactly
known latent semantics: corpus generation, annotated/standard pretraining,
loss-masked anchored post-training, annotation-first sampling, and
semantic-diversity evaluation.
"""

from . import (
    cli,
    client,
    evaluation,
    experiments,
    model,
    optim,
    pipeline,
    sampler,
    tensor,
    tokenizer,
    trainer,
    world,
)

__version__ = "0.1.0"

__all__ = [
    "tensor",
    "optim",
    "tokenizer",
    "world",
    "pipeline",
    "model",
    "trainer",
    "sampler",
    "evaluation",
    "client",
    "experiments",
    "cli",
    "__version__",
]
