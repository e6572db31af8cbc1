"""Word-level tokenizer over the synthetic world's closed vocabulary.

Reserved structural tokens delimit annotation spans exactly, so span
extraction never depends on heuristics. The vocabulary is a total bijection
between token strings and ids; unknown words map to UNK on encode.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Sequence, Tuple

__all__ = [
    "Vocab",
    "SpanLabel",
    "SpanStructureError",
    "RESERVED_TOKENS",
    "BOS",
    "EOS",
    "ANN_START",
    "ANN_END",
    "TAG_SEP",
    "KV_SEP",
    "PROMPT_END",
    "UNK",
    "build_vocab",
    "span_classify",
]

# reserved ids are fixed; word ids start after them
BOS, EOS, ANN_START, ANN_END, TAG_SEP, KV_SEP, PROMPT_END, UNK = range(8)

RESERVED_TOKENS: Tuple[str, ...] = (
    "<bos>",
    "<eos>",
    "<ann>",
    "</ann>",
    "<tag>",
    ":",
    "<eop>",
    "<unk>",
)

N_RESERVED = len(RESERVED_TOKENS)


class SpanLabel(Enum):
    PROMPT = "prompt"
    ANN_KEY = "ann-key"
    ANN_VALUE = "ann-value"
    RESPONSE = "response"
    STRUCTURAL = "structural"


class SpanStructureError(ValueError):
    """Unbalanced or misplaced structural token."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (token index {index})")
        self.index = index


class Vocab:
    """Immutable token-string <-> id bijection with reserved ids first."""

    def __init__(self, words: Sequence[str]):
        self.id_to_token: List[str] = list(RESERVED_TOKENS) + list(words)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        for w in words:
            if not w or any(c.isspace() for c in w):
                raise ValueError(f"invalid vocabulary word: {w!r}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, text: str) -> List[int]:
        """Whitespace word split; unknown words map to UNK."""
        return [self.token_to_id.get(w, UNK) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh]
        toks = [t for t in toks if t != ""]
        if tuple(toks[:N_RESERVED]) != RESERVED_TOKENS:
            raise ValueError("vocab file does not start with the reserved tokens")
        return cls(toks[N_RESERVED:])


def build_vocab(token_stream: Iterable[str]) -> Vocab:
    """Deterministic vocabulary from a token stream: reserved tokens first,
    then words in first-occurrence order. Reserved surfaces in the stream are
    skipped rather than duplicated."""
    seen: Dict[str, None] = {}
    reserved = set(RESERVED_TOKENS)
    for tok in token_stream:
        if tok in reserved or tok in seen:
            continue
        seen[tok] = None
    return Vocab(list(seen))


_STRUCTURAL_IDS = {BOS, EOS, ANN_START, ANN_END, TAG_SEP, KV_SEP, PROMPT_END}


def span_classify(ids: Sequence[int], vocab: Vocab = None) -> List[SpanLabel]:
    """Label every token as prompt / annotation-key / annotation-value /
    response / structural.

    Layout rules: an optional prompt block runs from BOS to the first
    PROMPT_END; annotation blocks are balanced ANN_START..ANN_END with
    key tokens before each KV_SEP and value tokens after it; everything
    else outside annotations is response. Raises SpanStructureError on
    unbalanced or misplaced structural tokens.
    """
    n = len(ids)
    labels: List[SpanLabel] = [SpanLabel.RESPONSE] * n

    # prompt block: tokens strictly between the start and the first PROMPT_END,
    # valid only if no annotation opens before it
    prompt_end_idx = -1
    for i, t in enumerate(ids):
        if t == ANN_START:
            break
        if t == PROMPT_END:
            prompt_end_idx = i
            break

    in_ann = False
    in_value = False
    for i, t in enumerate(ids):
        if t == ANN_START:
            if in_ann:
                raise SpanStructureError("nested annotation start", i)
            in_ann, in_value = True, False
            labels[i] = SpanLabel.STRUCTURAL
        elif t == ANN_END:
            if not in_ann:
                raise SpanStructureError("annotation end without start", i)
            in_ann = False
            labels[i] = SpanLabel.STRUCTURAL
        elif t == KV_SEP:
            if not in_ann:
                raise SpanStructureError("key-value separator outside annotation", i)
            if in_value:
                raise SpanStructureError("second key-value separator in one tag", i)
            in_value = True
            labels[i] = SpanLabel.STRUCTURAL
        elif t == TAG_SEP:
            if not in_ann:
                raise SpanStructureError("tag separator outside annotation", i)
            in_value = False
            labels[i] = SpanLabel.STRUCTURAL
        elif t == PROMPT_END:
            if in_ann:
                raise SpanStructureError("prompt end inside annotation", i)
            labels[i] = SpanLabel.STRUCTURAL
        elif t in (BOS, EOS):
            if in_ann:
                raise SpanStructureError("document boundary inside annotation", i)
            labels[i] = SpanLabel.STRUCTURAL
        else:
            if in_ann:
                labels[i] = SpanLabel.ANN_VALUE if in_value else SpanLabel.ANN_KEY
            elif prompt_end_idx >= 0 and i < prompt_end_idx:
                labels[i] = SpanLabel.PROMPT
    if in_ann:
        raise SpanStructureError("annotation left open", n - 1)
    return labels
