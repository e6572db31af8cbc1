"""Semantic-entropy and embedding-dissimilarity diversity metrics.

Entropy is reported in bits (log base 2) throughout; the plug-in
(maximum-likelihood) estimator is used with a percentile bootstrap interval
for uncertainty. The synthetic world supplies an exact labeler, so no
external judge is needed for the desk-scale studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tokenizer as tk
from .tokenizer import Vocab
from .world import CATEGORIES, WorldSpec, exact_label

__all__ = [
    "LabelDistribution",
    "EntropyReport",
    "EvaluationError",
    "semantic_entropy",
    "pooled_entropy",
    "pairwise_dissimilarity",
    "bag_of_features_embed",
    "label_with_exact",
    "make_exact_labeler",
    "STOP_WORDS",
]

# filler words excluded from the bag-of-features embedding
STOP_WORDS = frozenset(
    "the a an and or of to in on by as if it this that for me you were was is".split()
)


class EvaluationError(ValueError):
    pass


@dataclass
class LabelDistribution:
    category: str
    counts: Dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def entropy_bits(self) -> float:
        n = self.total
        if n == 0:
            raise EvaluationError("empty label distribution")
        h = 0.0
        for c in self.counts.values():
            if c:
                p = c / n
                h -= p * math.log2(p)
        return h


@dataclass
class EntropyReport:
    per_category: Dict[str, float]  # bits
    mean_bits: float
    sample_count: int
    ci95: Tuple[float, float]
    distributions: Dict[str, LabelDistribution] = field(default_factory=dict)
    dataset_entropy_bits: Optional[Dict[str, float]] = None

    def as_dict(self) -> Dict:
        return {
            "per_category": dict(self.per_category),
            "mean_bits": self.mean_bits,
            "sample_count": self.sample_count,
            "ci95": list(self.ci95),
            "dataset_entropy_bits": self.dataset_entropy_bits,
        }


Labeler = Callable[[str], Dict[str, str]]


def make_exact_labeler(spec: WorldSpec) -> Labeler:
    def labeler(text: str) -> Dict[str, str]:
        return exact_label(text, spec).as_dict()

    return labeler


def label_with_exact(generations: Sequence, spec: WorldSpec) -> List[Dict[str, str]]:
    """Exact per-category labels for each generation's response text."""
    labeler = make_exact_labeler(spec)
    return [labeler(_response_text(g)) for g in generations]


def _response_text(g) -> str:
    return g if isinstance(g, str) else g.response


def _mean_entropy(label_rows: List[Dict[str, str]], categories: Sequence[str]) -> Tuple[Dict[str, float], Dict[str, LabelDistribution]]:
    per_cat: Dict[str, float] = {}
    dists: Dict[str, LabelDistribution] = {}
    for cat in categories:
        counts: Dict[str, int] = {}
        for row in label_rows:
            lab = row[cat]
            counts[lab] = counts.get(lab, 0) + 1
        dist = LabelDistribution(cat, counts)
        dists[cat] = dist
        per_cat[cat] = dist.entropy_bits()
    return per_cat, dists


def semantic_entropy(
    generations: Sequence,
    labeler: Labeler,
    categories: Sequence[str] = CATEGORIES,
    n_bootstrap: int = 1000,
    bootstrap_seed: int = 0,
    dataset_entropy_bits: Optional[Dict[str, float]] = None,
) -> EntropyReport:
    """Plug-in entropy per category (bits), averaged across categories, with a
    percentile bootstrap 95% interval over the generation sample."""
    if len(generations) < 2:
        raise EvaluationError("need at least two generations")
    rows = [labeler(_response_text(g)) for g in generations]
    per_cat, dists = _mean_entropy(rows, categories)
    mean_bits = sum(per_cat.values()) / len(categories)

    n = len(rows)
    rng = np.random.default_rng(bootstrap_seed)
    boot = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        idx = rng.integers(0, n, size=n)
        sample = [rows[i] for i in idx]
        pc, _ = _mean_entropy(sample, categories)
        boot[b] = sum(pc.values()) / len(categories)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return EntropyReport(
        per_category=per_cat,
        mean_bits=mean_bits,
        sample_count=n,
        ci95=(float(lo), float(hi)),
        distributions=dists,
        dataset_entropy_bits=dataset_entropy_bits,
    )


def pooled_entropy(
    groups: Sequence[Sequence],
    labeler: Labeler,
    categories: Sequence[str] = CATEGORIES,
    n_bootstrap: int = 1000,
    bootstrap_seed: int = 0,
) -> EntropyReport:
    """Entropy over all responses pooled across groups; identical to
    semantic_entropy on the concatenation."""
    if not groups:
        raise EvaluationError("need at least one group")
    flat = [g for group in groups for g in group]
    return semantic_entropy(flat, labeler, categories, n_bootstrap, bootstrap_seed)


def pairwise_dissimilarity(
    generations: Sequence,
    embedder: Callable[[str], np.ndarray],
) -> Tuple[float, np.ndarray]:
    """D = 1 - (2 / n(n-1)) * sum_{i<j} cos(e_i, e_j), plus the cosine matrix."""
    n = len(generations)
    if n < 2:
        raise EvaluationError("need at least two generations")
    embs = []
    for g in generations:
        e = np.asarray(embedder(_response_text(g)), dtype=np.float64)
        norm = np.linalg.norm(e)
        if not np.isfinite(e).all() or norm == 0:
            raise EvaluationError("zero or non-finite embedding")
        embs.append(e / norm)
    mat = np.stack(embs)
    cos = mat @ mat.T
    iu = np.triu_indices(n, k=1)
    d = 1.0 - (2.0 / (n * (n - 1))) * float(cos[iu].sum())
    return d, cos


def bag_of_features_embed(text: str, vocab: Vocab) -> np.ndarray:
    """L2-normalized term-frequency vector over content words (reserved and
    stop tokens excluded)."""
    counts = np.zeros(len(vocab), dtype=np.float64)
    n_content = 0
    for w in text.split():
        tid = vocab.token_to_id.get(w)
        if tid is None or tid < tk.N_RESERVED or w in STOP_WORDS:
            continue
        counts[tid] += 1
        n_content += 1
    if n_content == 0:
        raise EvaluationError("text has no content words")
    return counts / np.linalg.norm(counts)
