"""Decoding with implicit annotation sampling and response extraction.

Anchored checkpoints are seeded with [BOS, prompt, PROMPT_END] and sampled
freely: the annotation emerges as ordinary model-generated tokens and is then
split from the response by span classification. The no-annotation ablation
injects an empty annotation block instead, removing the sampled semantic plan
while keeping the sequence format in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tokenizer as tk
from .model import InferenceSession
from .tokenizer import SpanLabel, Vocab
from .trainer import Checkpoint

__all__ = ["SampleConfig", "Generation", "generate", "generate_no_annotation", "batch_generate"]

MODES = ("anchored", "plain", "no-annotation")


@dataclass
class SampleConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 512
    mode: str = "anchored"
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0 (0 means greedy)")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode}")


@dataclass
class Generation:
    prompt: str
    annotation: str
    response: str
    token_ids: List[int]
    temperature: float
    seed: int
    flags: Dict = field(default_factory=dict)

    def as_dict(self) -> Dict:
        return {
            "prompt": self.prompt,
            "annotation": self.annotation,
            "response": self.response,
            "temperature": self.temperature,
            "seed": self.seed,
            "flags": dict(self.flags),
        }


def _sample_token(logits: np.ndarray, cfg: SampleConfig, rng: np.random.Generator) -> int:
    if cfg.temperature == 0.0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    if cfg.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        keep = int(np.searchsorted(cum, cfg.top_p) + 1)
        mask = np.zeros_like(p)
        mask[order[:keep]] = p[order[:keep]]
        p = mask / mask.sum()
    u = rng.random()
    return int(np.searchsorted(np.cumsum(p), u))


def _decode_content(ids: Sequence[int], vocab: Vocab, labels=None, wanted=None) -> str:
    words = []
    for i, t in enumerate(ids):
        if t < tk.N_RESERVED:
            continue
        if labels is not None and labels[i] not in wanted:
            continue
        words.append(vocab.id_to_token[t])
    return " ".join(words)


def _extract(ids: List[int], prompt_len: int, vocab: Vocab) -> Dict:
    """Split generated ids into annotation text and response text."""
    flags = {"format_failure": False}
    try:
        labels = tk.span_classify(ids, vocab)
    except tk.SpanStructureError:
        flags["format_failure"] = True
        # salvage: response is everything after the last closed annotation
        last_end = max((i for i, t in enumerate(ids) if t == tk.ANN_END), default=-1)
        tail = ids[max(last_end + 1, prompt_len) :]
        response = _decode_content(tail, vocab)
        return {"annotation": "", "response": response, "flags": flags}
    gen = ids[prompt_len:]
    gen_labels = labels[prompt_len:]
    annotation_words = []
    for t, lab in zip(gen, gen_labels):
        if lab in (SpanLabel.ANN_KEY, SpanLabel.ANN_VALUE):
            annotation_words.append(vocab.id_to_token[t])
        elif lab == SpanLabel.STRUCTURAL and t == tk.KV_SEP:
            annotation_words.append(vocab.id_to_token[t])
    response = _decode_content(gen, vocab, gen_labels, (SpanLabel.RESPONSE,))
    return {
        "annotation": " ".join(annotation_words),
        "response": response,
        "flags": flags,
    }


def _run(
    ckpt: Checkpoint,
    prefix: List[int],
    cfg: SampleConfig,
    rng: np.random.Generator,
) -> List[int]:
    session = InferenceSession(ckpt.params, ckpt.model_config)
    logits = session.prefill(prefix)
    ids = list(prefix)
    room = ckpt.model_config.context_len - len(prefix)
    for _ in range(min(cfg.max_new_tokens, room)):
        nxt = _sample_token(logits, cfg, rng)
        ids.append(nxt)
        if nxt == tk.EOS:
            break
        if len(ids) >= ckpt.model_config.context_len:
            break
        logits = session.step(nxt)
    return ids


def _prefix_for(prompt: str, cfg: SampleConfig, vocab: Vocab) -> List[int]:
    prefix = [tk.BOS]
    if prompt.strip():
        prefix.extend(vocab.encode(prompt))
        prefix.append(tk.PROMPT_END)
    if cfg.mode == "no-annotation":
        prefix.extend([tk.ANN_START, tk.ANN_END])
    return prefix


def generate(
    ckpt: Checkpoint,
    prompt: str,
    cfg: SampleConfig,
    vocab: Vocab,
    rng: Optional[np.random.Generator] = None,
) -> Generation:
    """One decoded sample. An empty prompt seeds bare [BOS] (base models)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    prefix = _prefix_for(prompt, cfg, vocab)
    ids = _run(ckpt, prefix, cfg, rng)
    parts = _extract(ids, len(prefix), vocab)
    if cfg.mode == "no-annotation":
        parts["annotation"] = ""
    return Generation(
        prompt=prompt,
        annotation=parts["annotation"],
        response=parts["response"],
        token_ids=ids,
        temperature=cfg.temperature,
        seed=cfg.seed,
        flags=parts["flags"],
    )


def generate_no_annotation(
    ckpt: Checkpoint,
    prompt: str,
    cfg: SampleConfig,
    vocab: Vocab,
    rng: Optional[np.random.Generator] = None,
) -> Generation:
    """Ablation: force an empty annotation block, then sample the response."""
    forced = SampleConfig(**{**asdict(cfg), "mode": "no-annotation"})
    return generate(ckpt, prompt, forced, vocab, rng)


def batch_generate(
    ckpt: Checkpoint,
    prompts: Sequence[str],
    cfg: SampleConfig,
    vocab: Vocab,
) -> List[Generation]:
    """One generation per prompt; the per-sample rng derives from
    (cfg.seed, index), so results do not depend on batch composition."""
    if not prompts:
        raise ValueError("prompts must be non-empty")
    out: List[Generation] = []
    for i, prompt in enumerate(prompts):
        rng = np.random.default_rng([cfg.seed, i])
        gen = generate(ckpt, prompt, cfg, vocab, rng)
        gen.seed = cfg.seed
        gen.flags["sample_index"] = i
        out.append(gen)
    return out
