"""Training-regime tests: loss masks, the partial-unmask branch rate,
checkpoint container, lineage rules, and learning-rate selection."""

import math
import os

import numpy as np
import pytest

import anchorlm.tokenizer as tk
from anchorlm.model import ModelConfig, forward_logits, init_params
from anchorlm.pipeline import AnnotationTag, build_sft_sequence, interleave, standard_document_ids
from anchorlm.tokenizer import SpanLabel, Vocab, build_vocab
from anchorlm.trainer import (
    Checkpoint,
    CheckpointMeta,
    TrainConfig,
    TrainerError,
    build_loss_mask,
    load_checkpoint,
    posttrain,
    pretrain,
    save_checkpoint,
    validation_likelihood,
    vocab_hash,
)
from anchorlm.world import WorldSpec, build_posttraining_subset, world_lexicon
import anchorlm.tensor as T


@pytest.fixture(scope="module")
def spec():
    return WorldSpec()


@pytest.fixture(scope="module")
def vocab(spec):
    return build_vocab(world_lexicon(spec))


@pytest.fixture(scope="module")
def anchored_seq(vocab):
    tags = [AnnotationTag("topic", "the sky"), AnnotationTag("entity", "Mira")]
    return build_sft_sequence("please share one short story", tags,
                              "down by the harbor Mira whispered rumors of the sky",
                              vocab, anchored=True)


# ---------------------------------------------------------------- loss masks


def test_pretrain_mask_all_ones(anchored_seq):
    ids, labels = anchored_seq
    mask = build_loss_mask(labels, "pretrain-annotated")
    assert np.all(mask.weights == 1.0)


def test_anchored_mask_regions(anchored_seq):
    ids, labels = anchored_seq
    rng = np.random.default_rng(0)
    mask = build_loss_mask(labels, "sft-anchored", rng, ids, partial_unmask_prob=0.0)
    for i, (t, lab) in enumerate(zip(ids, labels)):
        w = mask.weights[i]
        if lab == SpanLabel.RESPONSE:
            assert w == 1.0
        elif lab in (SpanLabel.PROMPT, SpanLabel.ANN_KEY, SpanLabel.ANN_VALUE):
            assert w == 0.0
        elif t == tk.EOS:
            assert w == 1.0
        else:
            assert w == 0.0  # BOS, PROMPT_END, annotation structural tokens


def test_anchored_partial_branch_unmasks_keys_not_values(anchored_seq):
    ids, labels = anchored_seq

    class Always(np.random.Generator):
        pass

    rng = np.random.default_rng(0)
    mask = build_loss_mask(labels, "sft-anchored", rng, ids, partial_unmask_prob=1.0)
    assert mask.partial_unmask
    for i, (t, lab) in enumerate(zip(ids, labels)):
        if lab == SpanLabel.ANN_KEY:
            assert mask.weights[i] == 1.0
        if lab == SpanLabel.ANN_VALUE:
            assert mask.weights[i] == 0.0  # values stay masked
        if t in (tk.ANN_START, tk.ANN_END, tk.TAG_SEP, tk.KV_SEP):
            assert mask.weights[i] == 1.0
        if t in (tk.BOS, tk.PROMPT_END):
            assert mask.weights[i] == 0.0


def test_unmasked_regime_unmasks_full_annotation(anchored_seq):
    ids, labels = anchored_seq
    mask = build_loss_mask(labels, "sft-anchored-unmasked", ids=ids)
    for i, (t, lab) in enumerate(zip(ids, labels)):
        if lab in (SpanLabel.ANN_KEY, SpanLabel.ANN_VALUE, SpanLabel.RESPONSE):
            assert mask.weights[i] == 1.0
        if t in (tk.ANN_START, tk.ANN_END, tk.KV_SEP, tk.TAG_SEP):
            assert mask.weights[i] == 1.0
        if lab == SpanLabel.PROMPT or t in (tk.BOS, tk.PROMPT_END):
            assert mask.weights[i] == 0.0


def test_standard_mask(vocab):
    ids, labels = build_sft_sequence("tell me another small story", None,
                                     "inside the bakery", vocab, anchored=False)
    mask = build_loss_mask(labels, "sft-standard", ids=ids)
    for i, (t, lab) in enumerate(zip(ids, labels)):
        if lab == SpanLabel.RESPONSE or t == tk.EOS:
            assert mask.weights[i] == 1.0
        else:
            assert mask.weights[i] == 0.0


def test_partial_unmask_rate_100k(anchored_seq):
    """The rare branch fires at 0.003 +/- 0.0005 over 100k constructions."""
    ids, labels = anchored_seq
    rng = np.random.default_rng(123)
    n = 100000
    fired = sum(
        build_loss_mask(labels, "sft-anchored", rng, ids).partial_unmask
        for _ in range(n)
    )
    assert abs(fired / n - 0.003) < 0.0005


def test_mask_validation_errors(anchored_seq):
    ids, labels = anchored_seq
    with pytest.raises(TrainerError):
        build_loss_mask(labels, "sft-anchored", ids=ids)  # missing rng
    with pytest.raises(TrainerError):
        build_loss_mask(labels, "sft-standard")  # missing ids
    with pytest.raises(TrainerError):
        TrainConfig(regime="nonsense")


def test_anchored_masked_positions_zero_grad(vocab, anchored_seq):
    """End-to-end: gradients w.r.t. logits at masked positions are exactly zero."""
    from anchorlm.model import sequence_loss

    ids, labels = anchored_seq
    cfg = ModelConfig(vocab_size=len(vocab), context_len=64, n_layers=1, d_model=16, n_heads=2)
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    mask = build_loss_mask(labels, "sft-anchored", rng, ids, partial_unmask_prob=0.0)
    logits = forward_logits(params, np.asarray(ids)[:-1], cfg)
    res = T.masked_cross_entropy(logits, np.asarray(ids)[1:], mask.weights[1:])
    res.loss.backward()
    masked_rows = np.nonzero(mask.weights[1:] == 0)[0]
    assert np.all(logits.grad[masked_rows] == 0.0)


# ---------------------------------------------------------------- checkpoints


def _tiny_checkpoint(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), context_len=32, n_layers=1, d_model=16, n_heads=2, seed=3)
    params = init_params(cfg)
    meta = CheckpointMeta("pretrain-annotated", ["pretrain-annotated"], 5, 100, "abc", {"final_loss": 1.0})
    return Checkpoint(params, cfg, meta, vocab_hash(vocab))


def test_checkpoint_round_trip_bitwise(tmp_path, vocab):
    ckpt = _tiny_checkpoint(vocab)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path, expected_vocab=vocab)
    assert loaded.model_config == ckpt.model_config
    assert loaded.meta == ckpt.meta
    for k in ckpt.params:
        assert np.array_equal(loaded.params[k].data, ckpt.params[k].data)
    ids = np.array([1, 2, 3])
    with T.no_grad():
        a = forward_logits(ckpt.params, ids, ckpt.model_config).data
        b = forward_logits(loaded.params, ids, loaded.model_config).data
    assert np.array_equal(a, b)


def test_checkpoint_vocab_mismatch(tmp_path, vocab):
    ckpt = _tiny_checkpoint(vocab)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(ckpt, path)
    with pytest.raises(TrainerError):
        load_checkpoint(path, expected_vocab=Vocab(["just", "a", "few"]))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(TrainerError):
        load_checkpoint(str(path))


# ---------------------------------------------------------------- training loops


def _mini_corpus(spec, vocab, n=120):
    from anchorlm.pipeline import AnnotatedDocument
    from anchorlm.world import build_pretraining_corpus

    recs = build_pretraining_corpus(spec, n, seed=0)
    std = [standard_document_ids(r["chunks"], vocab) for r in recs]
    ann = [interleave(AnnotatedDocument.from_record(r), vocab) for r in recs]
    return std, ann


MODEL_KW = dict(context_len=128, n_layers=1, d_model=16, n_heads=2)


def test_pretrain_smoke_and_determinism(spec, vocab):
    std, _ = _mini_corpus(spec, vocab)
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    tcfg = TrainConfig(regime="pretrain-standard", lr_candidates=(1e-3,),
                       batch_size=8, window=64, token_budget=4096, seed=0)
    a = pretrain(std, tcfg, mcfg, vocab)
    b = pretrain(std, tcfg, mcfg, vocab)
    assert a.meta.lineage == ["pretrain-standard"]
    assert a.meta.token_count == 4096
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_pretrain_budget_enforced(spec, vocab):
    std, _ = _mini_corpus(spec, vocab, n=5)
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    tcfg = TrainConfig(regime="pretrain-standard", token_budget=10 ** 9, window=64)
    with pytest.raises(TrainerError):
        pretrain(std, tcfg, mcfg, vocab)
    with pytest.raises(TrainerError):
        pretrain(std, TrainConfig(regime="sft-standard"), mcfg, vocab)


def test_posttrain_lineage_rule(spec, vocab):
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    ds = build_posttraining_subset(spec, 40, None, seed=0)
    ann_meta = CheckpointMeta("pretrain-annotated", ["pretrain-annotated"], 0, 0, "x")
    init = Checkpoint(init_params(mcfg), mcfg, ann_meta, vocab_hash(vocab))
    cfg = TrainConfig(regime="sft-anchored-unmasked", lr_candidates=(1e-3,), batch_size=8, seed=0)
    with pytest.raises(TrainerError, match="pretrain-standard"):
        posttrain(ds, init, cfg, vocab)


def test_posttrain_runs_and_selects_lr(spec, vocab):
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    ds = build_posttraining_subset(spec, 60, {"topic": 5}, seed=0)
    meta = CheckpointMeta("pretrain-annotated", ["pretrain-annotated"], 0, 0, "x")
    init = Checkpoint(init_params(mcfg), mcfg, meta, vocab_hash(vocab))
    cfg = TrainConfig(regime="sft-anchored", lr_candidates=(1e-3, 3e-3),
                      batch_size=8, val_fraction=0.1, seed=0)
    out = posttrain(ds, init, cfg, vocab)
    assert out.meta.lineage == ["pretrain-annotated", "sft-anchored"]
    assert out.meta.metrics["selected_lr"] in (1e-3, 3e-3)
    assert out.meta.metrics["val_perplexity"] > 0
    # init params untouched (posttrain clones)
    fresh = init_params(mcfg)
    for k in fresh:
        assert np.array_equal(init.params[k].data, fresh[k].data)


def test_posttrain_determinism(spec, vocab):
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    ds = build_posttraining_subset(spec, 40, None, seed=1)
    meta = CheckpointMeta("pretrain-standard", ["pretrain-standard"], 0, 0, "x")
    init = Checkpoint(init_params(mcfg), mcfg, meta, vocab_hash(vocab))
    cfg = TrainConfig(regime="sft-standard", lr_candidates=(1e-3,), batch_size=8,
                      val_fraction=0.1, seed=2)
    a = posttrain(ds, init, cfg, vocab)
    b = posttrain(ds, init, cfg, vocab)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_validation_likelihood_improves_with_training(spec, vocab):
    """Longer training raises training-set likelihood (monotonicity smoke)."""
    mcfg = ModelConfig(vocab_size=len(vocab), **MODEL_KW)
    ds = build_posttraining_subset(spec, 60, {"topic": 5}, seed=0)
    meta = CheckpointMeta("pretrain-annotated", ["pretrain-annotated"], 0, 0, "x")
    init = Checkpoint(init_params(mcfg), mcfg, meta, vocab_hash(vocab))
    from anchorlm.trainer import _sft_sequences

    seqs = _sft_sequences(ds, "sft-anchored", vocab)
    ll_init = validation_likelihood(init.params, seqs, mcfg)
    one = posttrain(ds, init, TrainConfig(regime="sft-anchored", lr_candidates=(1e-3,),
                                          batch_size=8, epochs=1, val_fraction=0.1, seed=0), vocab)
    two = posttrain(ds, init, TrainConfig(regime="sft-anchored", lr_candidates=(1e-3,),
                                          batch_size=8, epochs=2, val_fraction=0.1, seed=0), vocab)
    ll_one = validation_likelihood(one.params, seqs, mcfg)
    ll_two = validation_likelihood(two.params, seqs, mcfg)
    assert ll_one > ll_init
    assert ll_two > ll_one


def test_vocab_hash_stable(vocab):
    assert vocab_hash(vocab) == vocab_hash(build_vocab(world_lexicon(WorldSpec())))
    assert vocab_hash(vocab) != vocab_hash(Vocab(["other"]))
