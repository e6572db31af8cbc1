"""Diversity-metric tests against independent oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorlm.evaluation import (
    EvaluationError,
    LabelDistribution,
    bag_of_features_embed,
    label_with_exact,
    make_exact_labeler,
    pairwise_dissimilarity,
    pooled_entropy,
    semantic_entropy,
)
from anchorlm.tokenizer import build_vocab
from anchorlm.world import (
    CATEGORIES,
    OTHER_LABEL,
    WorldSpec,
    render_chunk,
    sample_latent,
    world_lexicon,
)


@pytest.fixture(scope="module")
def spec():
    return WorldSpec()


@pytest.fixture(scope="module")
def vocab(spec):
    return build_vocab(world_lexicon(spec))


def const_labeler(label):
    return lambda text: {c: label for c in CATEGORIES}


def labeler_from_map(mapping):
    return lambda text: {c: mapping[text] for c in CATEGORIES}


# ---------------------------------------------------------------- entropy


def plug_in_entropy_oracle(labels):
    """Direct summation oracle: H = -sum p log2 p over the empirical dist."""
    n = len(labels)
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def test_identical_generations_zero_entropy():
    rep = semantic_entropy(["a", "a", "a"], const_labeler("x"))
    assert rep.mean_bits == 0.0
    assert all(v == 0.0 for v in rep.per_category.values())


def test_uniform_over_k_gives_log2k_exactly():
    for k in (2, 4, 8, 16):
        texts = [f"t{i}" for i in range(k)]
        rep = semantic_entropy(texts, labeler_from_map({t: t for t in texts}))
        assert rep.mean_bits == math.log2(k)


def test_321_count_case_matches_oracle():
    labels = ["a", "a", "a", "b", "b", "c"]
    texts = [f"x{i}" for i in range(6)]
    mapping = dict(zip(texts, labels))
    rep = semantic_entropy(texts, labeler_from_map(mapping))
    oracle = plug_in_entropy_oracle(labels)
    assert abs(rep.mean_bits - oracle) < 1e-12
    assert abs(oracle - 1.4591479170272448) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_entropy_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 60))
    labels = [f"l{int(rng.integers(0, 6))}" for _ in range(n)]
    texts = [f"t{i}" for i in range(n)]
    rep = semantic_entropy(texts, labeler_from_map(dict(zip(texts, labels))))
    assert abs(rep.mean_bits - plug_in_entropy_oracle(labels)) < 1e-12


def test_entropy_invariant_under_relabeling():
    texts = [f"t{i}" for i in range(8)]
    labels = ["a", "a", "b", "b", "b", "c", "c", "d"]
    permuted = {"a": "z", "b": "q", "c": "w", "d": "e"}
    r1 = semantic_entropy(texts, labeler_from_map(dict(zip(texts, labels))))
    r2 = semantic_entropy(texts, labeler_from_map({t: permuted[l] for t, l in zip(texts, labels)}))
    assert r1.mean_bits == r2.mean_bits


def test_entropy_needs_two_generations():
    with pytest.raises(EvaluationError):
        semantic_entropy(["only one"], const_labeler("x"))


def test_bootstrap_ci_deterministic_and_ordered():
    texts = [f"t{i}" for i in range(12)]
    labels = [f"l{i % 3}" for i in range(12)]
    lab = labeler_from_map(dict(zip(texts, labels)))
    a = semantic_entropy(texts, lab, bootstrap_seed=5)
    b = semantic_entropy(texts, lab, bootstrap_seed=5)
    assert a.ci95 == b.ci95
    assert a.ci95[0] <= a.ci95[1]


def test_entropy_bounded_by_log_support():
    rng = np.random.default_rng(1)
    texts = [f"t{i}" for i in range(40)]
    labels = [f"l{int(rng.integers(0, 7))}" for _ in range(40)]
    rep = semantic_entropy(texts, labeler_from_map(dict(zip(texts, labels))))
    assert rep.mean_bits <= math.log2(7) + 1e-12


def test_label_distribution_validation():
    with pytest.raises(EvaluationError):
        LabelDistribution("topic", {}).entropy_bits()


# ---------------------------------------------------------------- pooled


def test_pooled_equals_flattened():
    texts = [f"t{i}" for i in range(32)]
    labels = [f"l{i % 5}" for i in range(32)]
    lab = labeler_from_map(dict(zip(texts, labels)))
    groups = [texts[i: i + 8] for i in range(0, 32, 8)]
    pooled = pooled_entropy(groups, lab)
    flat = semantic_entropy(texts, lab)
    assert pooled.per_category == flat.per_category
    assert pooled.mean_bits == flat.mean_bits
    assert pooled.ci95 == flat.ci95


def test_pooled_single_group_identity():
    texts = [f"t{i}" for i in range(6)]
    lab = labeler_from_map({t: t for t in texts})
    assert pooled_entropy([texts], lab).mean_bits == semantic_entropy(texts, lab).mean_bits


def test_pooled_needs_groups():
    with pytest.raises(EvaluationError):
        pooled_entropy([], const_labeler("x"))


# ---------------------------------------------------------------- dissimilarity


def identity_embedder(mapping):
    return lambda text: mapping[text]


def test_identical_embeddings_zero_dissimilarity():
    e = np.array([1.0, 2.0, 3.0])
    d, cos = pairwise_dissimilarity(["a", "b", "c"], lambda t: e)
    assert abs(d) < 1e-12
    assert np.allclose(cos, 1.0)


def test_orthogonal_embeddings_unit_dissimilarity():
    m = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
    d, _ = pairwise_dissimilarity(["a", "b"], identity_embedder(m))
    assert abs(d - 1.0) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_dissimilarity_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    vecs = {f"t{i}": rng.normal(size=6) for i in range(n)}
    texts = list(vecs)
    d, _ = pairwise_dissimilarity(texts, identity_embedder(vecs))
    # O(n^2) direct summation
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            a, b = vecs[texts[i]], vecs[texts[j]]
            total += float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    oracle = 1.0 - 2.0 / (n * (n - 1)) * total
    assert abs(d - oracle) < 1e-12


def test_dissimilarity_scale_invariant():
    rng = np.random.default_rng(3)
    vecs = {f"t{i}": rng.normal(size=5) for i in range(4)}
    texts = list(vecs)
    d1, _ = pairwise_dissimilarity(texts, identity_embedder(vecs))
    scaled = {k: 17.0 * v for k, v in vecs.items()}
    d2, _ = pairwise_dissimilarity(texts, identity_embedder(scaled))
    assert abs(d1 - d2) < 1e-12


def test_dissimilarity_errors():
    with pytest.raises(EvaluationError):
        pairwise_dissimilarity(["one"], lambda t: np.ones(2))
    with pytest.raises(EvaluationError):
        pairwise_dissimilarity(["a", "b"], lambda t: np.zeros(3))


# ---------------------------------------------------------------- embedding


def test_embed_identical_texts_cosine_one(vocab):
    t = "down by the harbor Mira whispered rumors of pirates"
    a = bag_of_features_embed(t, vocab)
    b = bag_of_features_embed(t, vocab)
    assert abs(float(a @ b) - 1.0) < 1e-12


def test_embed_disjoint_texts_cosine_zero(vocab):
    a = bag_of_features_embed("Mira harbor pirates", vocab)
    b = bag_of_features_embed("Finn meadow gardens", vocab)
    assert abs(float(a @ b)) < 1e-12


def test_embed_normalized_and_nonnegative(vocab):
    e = bag_of_features_embed("Mira lingered near the harbor", vocab)
    assert abs(np.linalg.norm(e) - 1.0) < 1e-12
    assert np.all(e >= 0)


def test_embed_excludes_stop_and_reserved(vocab):
    with pytest.raises(EvaluationError):
        bag_of_features_embed("the of and <ann> <eos>", vocab)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_embed_cosine_range(seed):
    spec = WorldSpec()
    vocab = build_vocab(world_lexicon(spec))
    rng = np.random.default_rng(seed)
    a = render_chunk(sample_latent(spec, rng), rng)
    b = render_chunk(sample_latent(spec, rng), rng)
    cos = float(bag_of_features_embed(a, vocab) @ bag_of_features_embed(b, vocab))
    assert -1e-12 <= cos <= 1.0 + 1e-12


# ---------------------------------------------------------------- exact labeler


def test_label_with_exact_recovers_latents(spec):
    rng = np.random.default_rng(4)
    latents = [sample_latent(spec, rng) for _ in range(50)]
    texts = [render_chunk(lat, rng) for lat in latents]
    rows = label_with_exact(texts, spec)
    for row, lat in zip(rows, latents):
        assert row == lat.as_dict()


def test_label_with_exact_degenerate_other(spec):
    rows = label_with_exact(["nothing"], spec)
    assert all(v == OTHER_LABEL for v in rows[0].values())


def test_exact_labeler_agrees_with_regex_oracle(spec):
    """Independent regex-based labeler agrees on 10k rendered chunks."""
    import re

    catalogs = spec.catalogs()
    patterns = {
        attr: [(v, re.compile(r"(?:^|\s)" + re.escape(v) + r"(?:\s|$)")) for v in cat]
        for attr, cat in catalogs.items()
    }

    def regex_label(text):
        out = {}
        for attr, pats in patterns.items():
            best = (len(text) + 1, -1, OTHER_LABEL)
            for v, pat in pats:
                m = pat.search(text)
                if m and (m.start() < best[0] or (m.start() == best[0] and len(v) > best[1])):
                    best = (m.start(), len(v), v)
            out[attr] = best[2]
        return out

    rng = np.random.default_rng(5)
    agree = 0
    n = 10000
    labeler = make_exact_labeler(spec)
    for _ in range(n):
        text = render_chunk(sample_latent(spec, rng), rng)
        if labeler(text) == regex_label(text):
            agree += 1
    assert agree / n >= 0.99


def test_report_as_dict_round_trips():
    texts = [f"t{i}" for i in range(4)]
    rep = semantic_entropy(texts, labeler_from_map({t: t for t in texts}))
    d = rep.as_dict()
    assert d["mean_bits"] == rep.mean_bits
    assert d["sample_count"] == 4
