"""Chunking, tag serialization, interleaving, and token-budget matching.

The training-sequence layouts live here:

  pretraining (annotated):  <bos> <ann> tags </ann> chunk ... <eos>
  pretraining (standard):   <bos> chunk chunk ... <eos>
  SFT (anchored):           <bos> prompt <eop> <ann> tags </ann> response <eos>
  SFT (standard):           <bos> prompt <eop> response <eos>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import tokenizer as tk
from .tokenizer import SpanLabel, Vocab
from .world import SemanticLatent

__all__ = [
    "AnnotationTag",
    "AnnotatedDocument",
    "PipelineError",
    "chunk_document",
    "serialize_tags",
    "parse_tags",
    "tag_token_ids",
    "interleave",
    "strip_annotations",
    "standard_document_ids",
    "build_sft_sequence",
    "token_budget_match",
]

TAG_SEP_SURFACE = tk.RESERVED_TOKENS[tk.TAG_SEP]


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationTag:
    key: str
    value: str

    def __post_init__(self):
        if not self.key:
            raise PipelineError("empty tag key")

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "AnnotationTag":
        return cls(d["key"], d["value"])


@dataclass
class AnnotatedDocument:
    """Chunks x1..xn with per-chunk tag lists z1..zn."""

    chunks: List[str]
    tags: List[List[AnnotationTag]]
    latent: Optional[SemanticLatent] = None

    def __post_init__(self):
        if len(self.chunks) != len(self.tags):
            raise PipelineError("one tag list per chunk required")
        if not self.chunks or any(not c.strip() for c in self.chunks):
            raise PipelineError("chunks must be non-empty")

    @classmethod
    def from_record(cls, rec: Dict) -> "AnnotatedDocument":
        tags = [[AnnotationTag.from_dict(t) for t in chunk_tags] for chunk_tags in rec["annotations"]]
        latent = SemanticLatent.from_dict(rec["latent"]) if "latent" in rec else None
        return cls(chunks=list(rec["chunks"]), tags=tags, latent=latent)


def chunk_document(text: str) -> List[str]:
    """Split on blank-line boundaries; empty fragments dropped, order kept."""
    if not text.strip():
        raise PipelineError("whitespace-only document")
    return [frag for frag in text.split("\n\n") if frag.strip()]


def serialize_tags(tags: Sequence[AnnotationTag]) -> str:
    """'key:value' items joined by the tag-separator surface, in given order."""
    if not tags:
        raise PipelineError("empty tag list")
    return f" {TAG_SEP_SURFACE} ".join(f"{t.key}:{t.value}" for t in tags)


def parse_tags(text: str) -> List[AnnotationTag]:
    """Inverse of serialize_tags for keys without ':' in them."""
    items = text.split(f" {TAG_SEP_SURFACE} ")
    tags = []
    for item in items:
        if ":" not in item:
            raise PipelineError(f"malformed tag item: {item!r}")
        key, value = item.split(":", 1)
        tags.append(AnnotationTag(key, value))
    return tags


def tag_token_ids(tags: Sequence[AnnotationTag], vocab: Vocab) -> List[int]:
    """Token ids of the annotation body: key tokens, KV_SEP, value tokens,
    TAG_SEP between tags. Multi-word values span multiple value tokens."""
    if not tags:
        raise PipelineError("empty tag list")
    ids: List[int] = []
    for i, t in enumerate(tags):
        if i:
            ids.append(tk.TAG_SEP)
        ids.extend(vocab.encode(t.key))
        ids.append(tk.KV_SEP)
        value_ids = vocab.encode(t.value)
        if not value_ids:
            raise PipelineError(f"tag value produced no tokens: {t!r}")
        ids.extend(value_ids)
    return ids


def interleave(doc: AnnotatedDocument, vocab: Vocab) -> List[int]:
    """<bos> (<ann> tags </ann> chunk)* <eos> in chunk order."""
    ids: List[int] = [tk.BOS]
    for chunk, tags in zip(doc.chunks, doc.tags):
        ids.append(tk.ANN_START)
        ids.extend(tag_token_ids(tags, vocab))
        ids.append(tk.ANN_END)
        ids.extend(vocab.encode(chunk))
    ids.append(tk.EOS)
    return ids


def standard_document_ids(chunks: Sequence[str], vocab: Vocab) -> List[int]:
    """<bos> chunk tokens ... <eos>, no annotations."""
    ids: List[int] = [tk.BOS]
    for chunk in chunks:
        ids.extend(vocab.encode(chunk))
    ids.append(tk.EOS)
    return ids


def strip_annotations(ids: Sequence[int], vocab: Vocab) -> List[List[int]]:
    """Chunk-wise content token lists with every annotation block and document
    delimiter removed. Joining decoded chunks with blank lines recovers the
    document text."""
    labels = tk.span_classify(ids, vocab)
    chunks: List[List[int]] = []
    current: List[int] = []
    for t, lab in zip(ids, labels):
        if t == tk.ANN_START:
            if current:
                chunks.append(current)
                current = []
        elif lab in (SpanLabel.RESPONSE, SpanLabel.PROMPT):
            current.append(t)
    if current:
        chunks.append(current)
    return chunks


def build_sft_sequence(
    prompt: str,
    tags: Optional[Sequence[AnnotationTag]],
    response: str,
    vocab: Vocab,
    anchored: bool = True,
) -> Tuple[List[int], List[SpanLabel]]:
    """Token ids plus span labels for one SFT example.

    Anchored layout requires a non-empty annotation block; the standard
    baseline omits the block entirely (tags=None or anchored=False).
    """
    if not prompt.strip():
        raise PipelineError("empty prompt")
    if not response.strip():
        raise PipelineError("empty response")
    ids: List[int] = [tk.BOS]
    ids.extend(vocab.encode(prompt))
    ids.append(tk.PROMPT_END)
    if anchored:
        if not tags:
            raise PipelineError("anchored format requires a non-empty tag list")
        ids.append(tk.ANN_START)
        ids.extend(tag_token_ids(tags, vocab))
        ids.append(tk.ANN_END)
    ids.extend(vocab.encode(response))
    ids.append(tk.EOS)
    return ids, tk.span_classify(ids, vocab)


def token_budget_match(
    standard_docs: Sequence[Sequence[int]],
    annotated_docs: Sequence[Sequence[int]],
    budget: int,
) -> Tuple[List[List[int]], List[List[int]], Dict[str, int]]:
    """Truncate both tokenized document streams to at most `budget` tokens at
    document boundaries (last partial document dropped)."""
    if budget <= 0:
        raise PipelineError("budget must be positive")

    def take(docs: Sequence[Sequence[int]]) -> Tuple[List[List[int]], int]:
        out: List[List[int]] = []
        total = 0
        for d in docs:
            if total + len(d) > budget:
                break
            out.append(list(d))
            total += len(d)
        return out, total

    std_total_available = sum(len(d) for d in standard_docs)
    ann_total_available = sum(len(d) for d in annotated_docs)
    if budget > std_total_available or budget > ann_total_available:
        raise PipelineError("budget exceeds an input stream")
    std, n_std = take(standard_docs)
    ann, n_ann = take(annotated_docs)
    counts = {
        "standard_tokens": n_std,
        "annotated_tokens": n_ann,
        "standard_docs": len(std),
        "annotated_docs": len(ann),
    }
    return std, ann, counts
