"""Data-pipeline round-trip and layout tests."""

import numpy as np
import pytest

import anchorlm.tokenizer as tk
from anchorlm.pipeline import (
    AnnotatedDocument,
    AnnotationTag,
    PipelineError,
    build_sft_sequence,
    chunk_document,
    interleave,
    parse_tags,
    serialize_tags,
    standard_document_ids,
    strip_annotations,
    tag_token_ids,
    token_budget_match,
)
from anchorlm.tokenizer import SpanLabel, Vocab, build_vocab
from anchorlm.world import WorldSpec, render_document, sample_latent, world_lexicon


@pytest.fixture(scope="module")
def spec():
    return WorldSpec()


@pytest.fixture(scope="module")
def vocab(spec):
    return build_vocab(world_lexicon(spec))


def random_doc(spec, rng) -> AnnotatedDocument:
    lat = sample_latent(spec, rng)
    doc = render_document(spec, lat, rng)
    tags = [[AnnotationTag(k, getattr(lat, k)) for k in ("topic", "persona", "entity", "location")]
            for _ in doc.chunks]
    return AnnotatedDocument(chunks=doc.chunks, tags=tags, latent=lat)


# ---------------------------------------------------------------- chunking


def test_chunk_rejoin_identity_randomized(spec):
    rng = np.random.default_rng(0)
    for _ in range(2000):
        doc = render_document(spec, sample_latent(spec, rng), rng)
        text = doc.text
        assert "\n\n".join(chunk_document(text)) == text


def test_chunk_drops_empty_fragments():
    assert chunk_document("a\n\n\n\nb") == ["a", "b"]


def test_chunk_whitespace_only_errors():
    with pytest.raises(PipelineError):
        chunk_document("  \n\n  ")


# ---------------------------------------------------------------- tag serialization


def test_tag_serialize_parse_identity_randomized(spec):
    rng = np.random.default_rng(1)
    cats = spec.catalogs()
    keys = list(cats)
    for _ in range(10000):
        n = int(rng.integers(1, 5))
        tags = []
        for _ in range(n):
            k = keys[rng.integers(len(keys))]
            v = cats[k][rng.integers(len(cats[k]))]
            tags.append(AnnotationTag(k, v))
        assert parse_tags(serialize_tags(tags)) == tags


def test_serialize_tags_format():
    tags = [AnnotationTag("topic", "the sky"), AnnotationTag("entity", "Mira")]
    assert serialize_tags(tags) == "topic:the sky <tag> entity:Mira"


def test_serialize_empty_tags_errors():
    with pytest.raises(PipelineError):
        serialize_tags([])


def test_parse_malformed_tag_errors():
    with pytest.raises(PipelineError):
        parse_tags("no-colon-here")


def test_tag_token_ids_layout(vocab):
    tags = [AnnotationTag("topic", "the sky"), AnnotationTag("entity", "Mira")]
    ids = tag_token_ids(tags, vocab)
    expect = (
        vocab.encode("topic") + [tk.KV_SEP] + vocab.encode("the sky")
        + [tk.TAG_SEP]
        + vocab.encode("entity") + [tk.KV_SEP] + vocab.encode("Mira")
    )
    assert ids == expect
    assert tk.UNK not in ids


# ---------------------------------------------------------------- interleave / strip


def test_interleave_strip_identity_randomized(spec, vocab):
    rng = np.random.default_rng(2)
    for _ in range(2000):
        doc = random_doc(spec, rng)
        ids = interleave(doc, vocab)
        chunks = strip_annotations(ids, vocab)
        text = "\n\n".join(vocab.decode(c) for c in chunks)
        assert text == "\n\n".join(doc.chunks)


def test_interleave_layout(spec, vocab):
    rng = np.random.default_rng(3)
    doc = random_doc(spec, rng)
    ids = interleave(doc, vocab)
    assert ids[0] == tk.BOS and ids[-1] == tk.EOS
    assert ids.count(tk.ANN_START) == len(doc.chunks)
    assert ids.count(tk.ANN_END) == len(doc.chunks)


def test_standard_document_ids_no_annotations(spec, vocab):
    rng = np.random.default_rng(4)
    doc = random_doc(spec, rng)
    ids = standard_document_ids(doc.chunks, vocab)
    assert tk.ANN_START not in ids and tk.ANN_END not in ids
    assert ids[0] == tk.BOS and ids[-1] == tk.EOS


def test_annotated_document_validation():
    with pytest.raises(PipelineError):
        AnnotatedDocument(chunks=["a"], tags=[])
    with pytest.raises(PipelineError):
        AnnotatedDocument(chunks=[" "], tags=[[]])


# ---------------------------------------------------------------- SFT sequences


def test_build_sft_sequence_anchored(vocab):
    tags = [AnnotationTag("topic", "the sky")]
    ids, labels = build_sft_sequence("please share one short story", tags,
                                     "down by the harbor", vocab, anchored=True)
    assert ids[0] == tk.BOS and ids[-1] == tk.EOS
    assert tk.PROMPT_END in ids and tk.ANN_START in ids and tk.ANN_END in ids
    assert labels[1] == SpanLabel.PROMPT
    assert SpanLabel.ANN_VALUE in labels
    resp = [i for i, lab in zip(ids, labels) if lab == SpanLabel.RESPONSE]
    assert vocab.decode(resp) == "down by the harbor"


def test_build_sft_sequence_standard(vocab):
    ids, labels = build_sft_sequence("tell me another small story", None,
                                     "down by the harbor", vocab, anchored=False)
    assert tk.ANN_START not in ids
    assert SpanLabel.ANN_KEY not in labels


def test_build_sft_sequence_anchored_requires_tags(vocab):
    with pytest.raises(PipelineError):
        build_sft_sequence("p", [], "r", vocab, anchored=True)
    with pytest.raises(PipelineError):
        build_sft_sequence("", [AnnotationTag("a", "b")], "r", vocab)
    with pytest.raises(PipelineError):
        build_sft_sequence("p", [AnnotationTag("a", "b")], " ", vocab)


# ---------------------------------------------------------------- token budget


def test_token_budget_match_boundaries(spec, vocab):
    rng = np.random.default_rng(5)
    docs = [random_doc(spec, rng) for _ in range(40)]
    std = [standard_document_ids(d.chunks, vocab) for d in docs]
    ann = [interleave(d, vocab) for d in docs]
    budget = 600
    s, a, counts = token_budget_match(std, ann, budget)
    assert counts["standard_tokens"] == sum(len(d) for d in s) <= budget
    assert counts["annotated_tokens"] == sum(len(d) for d in a) <= budget
    # maximality: adding the next doc would exceed the budget
    assert counts["standard_tokens"] + len(std[len(s)]) > budget
    assert counts["annotated_tokens"] + len(ann[len(a)]) > budget
    # document boundaries: every kept doc is intact
    assert s == [list(d) for d in std[: len(s)]]


def test_token_budget_match_errors(spec, vocab):
    rng = np.random.default_rng(6)
    docs = [random_doc(spec, rng) for _ in range(3)]
    std = [standard_document_ids(d.chunks, vocab) for d in docs]
    ann = [interleave(d, vocab) for d in docs]
    with pytest.raises(PipelineError):
        token_budget_match(std, ann, 0)
    with pytest.raises(PipelineError):
        token_budget_match(std, ann, 10 ** 9)
