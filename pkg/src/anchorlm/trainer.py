"""Training regimes: standard/annotated pretraining, standard/anchored SFT,
and the two ablation regimes, with checkpointing and validation likelihood.

The anchored objective is implemented entirely through the loss mask: prompt
and annotation tokens carry weight 0, so their gradients are exactly zero and
the pretrained annotation distribution survives post-training untouched.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from . import tokenizer as tk
from .model import ModelConfig, forward_logits_batch, init_params
from .optim import AdamW, LrSchedule, lr_at
from .pipeline import AnnotationTag, build_sft_sequence
from .tokenizer import SpanLabel, Vocab
from .world import SftDataset

__all__ = [
    "PRETRAIN_REGIMES",
    "SFT_REGIMES",
    "LossMask",
    "TrainConfig",
    "CheckpointMeta",
    "Checkpoint",
    "TrainerError",
    "build_loss_mask",
    "pretrain",
    "posttrain",
    "validation_likelihood",
    "save_checkpoint",
    "load_checkpoint",
    "vocab_hash",
]

PRETRAIN_REGIMES = ("pretrain-standard", "pretrain-annotated")
SFT_REGIMES = ("sft-standard", "sft-anchored", "sft-anchored-unmasked")

_ANN_STRUCTURAL_IDS = {tk.ANN_START, tk.ANN_END, tk.TAG_SEP, tk.KV_SEP}


class TrainerError(RuntimeError):
    pass


@dataclass
class LossMask:
    weights: np.ndarray  # float32 in {0, 1}, one weight per token
    labels: List[SpanLabel]
    partial_unmask: bool = False  # whether the rare key-unmasking branch fired

    def __post_init__(self):
        if len(self.weights) != len(self.labels):
            raise TrainerError("mask length must match label count")


@dataclass
class TrainConfig:
    regime: str
    lr_candidates: Tuple[float, ...] = (3e-3,)
    batch_size: int = 16
    epochs: int = 1
    token_budget: Optional[int] = None
    window: int = 256
    partial_unmask_prob: float = 0.003
    warmup_ratio: float = 0.1
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    val_fraction: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.regime not in PRETRAIN_REGIMES + SFT_REGIMES:
            raise TrainerError(f"unknown regime: {self.regime}")
        if not self.lr_candidates:
            raise TrainerError("at least one learning-rate candidate required")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    regime: str
    lineage: List[str]
    step: int
    token_count: int
    config_hash: str
    metrics: Dict[str, float] = field(default_factory=dict)


@dataclass
class Checkpoint:
    params: Dict[str, T.Tensor]
    model_config: ModelConfig
    meta: CheckpointMeta
    vocab_hash: str = ""

    def clone_params(self) -> Dict[str, T.Tensor]:
        return {k: T.Tensor.param(v.data.copy()) for k, v in self.params.items()}


def vocab_hash(vocab: Vocab) -> str:
    return hashlib.sha256("\n".join(vocab.id_to_token).encode()).hexdigest()[:16]


# -- loss masks -------------------------------------------------------------------


def build_loss_mask(
    labels: Sequence[SpanLabel],
    regime: str,
    rng: Optional[np.random.Generator] = None,
    ids: Optional[Sequence[int]] = None,
    partial_unmask_prob: float = 0.003,
) -> LossMask:
    """Per-token weights for one training sequence under a regime.

    pretrain-*            all tokens weighted.
    sft-standard          prompt block masked, response + EOS unmasked.
    sft-anchored          prompt block and every annotation token masked;
                          with probability `partial_unmask_prob` (per example)
                          annotation keys and structural annotation tokens are
                          unmasked while values stay masked.
    sft-anchored-unmasked prompt masked, all annotation tokens unmasked.
    """
    labels = list(labels)
    n = len(labels)
    if regime in PRETRAIN_REGIMES:
        return LossMask(np.ones(n, dtype=np.float32), labels)
    if ids is None:
        raise TrainerError("SFT mask construction needs token ids")
    ids = list(ids)
    if len(ids) != n:
        raise TrainerError("ids length must match label count")

    partial = False
    if regime == "sft-anchored":
        if rng is None:
            raise TrainerError("sft-anchored mask needs an rng for the unmask branch")
        partial = bool(rng.random() < partial_unmask_prob)

    w = np.zeros(n, dtype=np.float32)
    for i, (lab, tok) in enumerate(zip(labels, ids)):
        if lab == SpanLabel.RESPONSE:
            w[i] = 1.0
        elif lab == SpanLabel.PROMPT:
            w[i] = 0.0
        elif lab == SpanLabel.ANN_KEY:
            if regime == "sft-anchored-unmasked" or (regime == "sft-anchored" and partial):
                w[i] = 1.0
        elif lab == SpanLabel.ANN_VALUE:
            if regime == "sft-anchored-unmasked":
                w[i] = 1.0
        elif lab == SpanLabel.STRUCTURAL:
            if tok == tk.EOS:
                w[i] = 1.0
            elif tok in _ANN_STRUCTURAL_IDS:
                if regime == "sft-anchored-unmasked" or (regime == "sft-anchored" and partial):
                    w[i] = 1.0
            # BOS / PROMPT_END stay masked in every SFT regime
    if regime == "sft-standard":
        # no annotation block expected; any annotation token stays masked
        pass
    return LossMask(w, labels, partial_unmask=partial)


# -- shared batch machinery ----------------------------------------------------------


def _batch_loss(
    params: Dict[str, T.Tensor],
    batch_ids: np.ndarray,
    batch_w: np.ndarray,
    config: ModelConfig,
) -> T.CrossEntropyResult:
    """Next-token loss over a padded [B, T] batch with per-token weights."""
    b, t = batch_ids.shape
    logits = forward_logits_batch(params, batch_ids[:, :-1], config)
    flat = logits.reshape(b * (t - 1), config.vocab_size)
    targets = batch_ids[:, 1:].reshape(-1)
    weights = batch_w[:, 1:].reshape(-1)
    return T.masked_cross_entropy(flat, targets, weights)


def _pad_batch(seqs: List[np.ndarray], weights: List[np.ndarray], pad_id: int):
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    w = np.zeros((len(seqs), t), dtype=np.float32)
    for i, (s, wi) in enumerate(zip(seqs, weights)):
        ids[i, : len(s)] = s
        w[i, : len(s)] = wi
    return ids, w


def _train_steps(
    params: Dict[str, T.Tensor],
    batches,
    model_config: ModelConfig,
    config: TrainConfig,
    total_steps: int,
    peak_lr: float,
    log: Optional[List[Dict]] = None,
) -> int:
    """Run the optimizer over an iterable of (ids, weights) batches."""
    opt = AdamW(
        params,
        weight_decay=config.weight_decay,
        max_grad_norm=config.max_grad_norm,
    )
    schedule = LrSchedule(peak_lr, total_steps, warmup_ratio=config.warmup_ratio)
    step = 0
    tokens = 0
    for ids, w in batches:
        lr = lr_at(schedule, step)
        opt.zero_grad()
        result = _batch_loss(params, ids, w, model_config)
        loss_val = float(result.loss.data)
        if not math.isfinite(loss_val):
            raise TrainerError(f"non-finite loss at step {step}")
        result.loss.backward()
        opt.step(lr)
        step += 1
        tokens += int(ids.size)
        if log is not None:
            log.append({"step": step, "tokens": tokens, "loss": loss_val, "lr": lr})
    return step


# -- pretraining ---------------------------------------------------------------------


def pretrain(
    docs: Sequence[Sequence[int]],
    config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vocab,
    log_path: Optional[str] = None,
) -> Checkpoint:
    """Train from scratch on tokenized documents up to the token budget.

    Documents are concatenated into a stream and cut into fixed windows;
    windows are shuffled once (seeded) and consumed in a single pass.
    """
    if config.regime not in PRETRAIN_REGIMES:
        raise TrainerError(f"pretrain called with regime {config.regime}")
    stream: List[int] = []
    for d in docs:
        stream.extend(d)
    budget = config.token_budget if config.token_budget is not None else len(stream)
    if budget > len(stream):
        raise TrainerError(f"token budget {budget} exceeds stream length {len(stream)}")
    window = min(config.window, model_config.context_len)
    arr = np.asarray(stream[:budget], dtype=np.int64)
    n_windows = len(arr) // window
    if n_windows == 0:
        raise TrainerError("budget smaller than one window")
    windows = arr[: n_windows * window].reshape(n_windows, window)
    rng = np.random.default_rng([config.seed, 17])
    order = rng.permutation(n_windows)

    params = init_params(model_config)
    b = config.batch_size
    total_steps = max(1, math.ceil(n_windows / b))
    ones = np.ones((1, window), dtype=np.float32)

    def batches():
        for start in range(0, n_windows, b):
            idx = order[start : start + b]
            ids = windows[idx]
            yield ids, np.broadcast_to(ones, ids.shape)

    log: List[Dict] = []
    steps = _train_steps(params, batches(), model_config, config, total_steps,
                         config.lr_candidates[0], log)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    meta = CheckpointMeta(
        regime=config.regime,
        lineage=[config.regime],
        step=steps,
        token_count=int(n_windows * window),
        config_hash=config.hash(),
        metrics={"final_loss": log[-1]["loss"] if log else float("nan")},
    )
    return Checkpoint(params, model_config, meta, vocab_hash(vocab))


# -- post-training ---------------------------------------------------------------------


def _sft_sequences(dataset: SftDataset, regime: str, vocab: Vocab):
    anchored = regime in ("sft-anchored", "sft-anchored-unmasked")
    out = []
    for ex in dataset.examples:
        tags = [AnnotationTag(t["key"], t["value"]) for t in ex.tags] if anchored else None
        ids, labels = build_sft_sequence(ex.prompt, tags, ex.response, vocab, anchored=anchored)
        out.append((np.asarray(ids, dtype=np.int64), labels))
    return out


def posttrain(
    dataset: SftDataset,
    init: Checkpoint,
    config: TrainConfig,
    vocab: Vocab,
    log_path: Optional[str] = None,
) -> Checkpoint:
    """One-epoch SFT from a pretrained checkpoint; the learning rate is picked
    from the candidates by validation perplexity (ties to the smaller lr)."""
    if config.regime not in SFT_REGIMES:
        raise TrainerError(f"posttrain called with regime {config.regime}")
    if len(dataset) == 0:
        raise TrainerError("empty SFT dataset")
    if config.regime == "sft-anchored-unmasked" and init.meta.lineage[:1] != ["pretrain-standard"]:
        raise TrainerError(
            "sft-anchored-unmasked isolates annotated pretraining and requires "
            f"a pretrain-standard checkpoint, got lineage {init.meta.lineage}"
        )

    seqs = _sft_sequences(dataset, config.regime, vocab)
    split_rng = np.random.default_rng([config.seed, 23])
    order = split_rng.permutation(len(seqs))
    n_val = max(1, int(round(config.val_fraction * len(seqs))))
    if n_val >= len(seqs):
        raise TrainerError("dataset too small for a validation split")
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    results = []
    log_rows: Dict[float, List[Dict]] = {}
    for lr in sorted(config.lr_candidates):
        params = init.clone_params()
        n_train = len(train_idx)
        total_steps = max(1, math.ceil(config.epochs * n_train / config.batch_size))
        mask_rng = np.random.default_rng([config.seed, 29])
        shuffle_rng = np.random.default_rng([config.seed, 31])

        def batches():
            for _ in range(config.epochs):
                epoch_order = train_idx[shuffle_rng.permutation(n_train)]
                for start in range(0, n_train, config.batch_size):
                    chunk = epoch_order[start : start + config.batch_size]
                    ids_list, w_list = [], []
                    for j in chunk:
                        ids, labels = seqs[j]
                        mask = build_loss_mask(
                            labels, config.regime, mask_rng, ids,
                            partial_unmask_prob=config.partial_unmask_prob,
                        )
                        ids_list.append(ids)
                        w_list.append(mask.weights)
                    yield _pad_batch(ids_list, w_list, tk.EOS)

        log: List[Dict] = []
        _train_steps(params, batches(), init.model_config, config, total_steps, lr, log)
        val_ll = validation_likelihood(params, [seqs[j] for j in val_idx], init.model_config)
        val_ppl = math.exp(-val_ll)
        results.append((val_ppl, lr, params))
        log_rows[lr] = log

    results.sort(key=lambda r: (r[0], r[1]))
    best_ppl, best_lr, best_params = results[0]
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            for row in log_rows[best_lr]:
                fh.write(json.dumps({**row, "lr_candidate": best_lr}) + "\n")
    meta = CheckpointMeta(
        regime=config.regime,
        lineage=init.meta.lineage + [config.regime],
        step=init.meta.step,
        token_count=int(sum(len(s) for s, _ in seqs)),
        config_hash=config.hash(),
        metrics={"val_perplexity": best_ppl, "selected_lr": best_lr},
    )
    return Checkpoint(best_params, init.model_config, meta, init.vocab_hash)


def validation_likelihood(
    params: Dict[str, T.Tensor],
    sequences: Sequence[Tuple[np.ndarray, List[SpanLabel]]],
    model_config: ModelConfig,
    batch_size: int = 32,
) -> float:
    """Mean log-likelihood per response-span token (masked spans excluded)."""
    total_ll = 0.0
    total_tokens = 0
    with T.no_grad():
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            ids_list = [ids for ids, _ in chunk]
            w_list = [
                np.asarray([1.0 if lab == SpanLabel.RESPONSE else 0.0 for lab in labels],
                           dtype=np.float32)
                for _, labels in chunk
            ]
            ids, w = _pad_batch(ids_list, w_list, tk.EOS)
            result = _batch_loss(params, ids, w, model_config)
            total_ll += -float(result.loss.data) * result.active
            total_tokens += result.active
    if total_tokens == 0:
        raise TrainerError("no response tokens in validation sequences")
    return total_ll / total_tokens


# -- checkpoint container ---------------------------------------------------------------

_MAGIC = b"ALMC0001"


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Container: magic, u32 header length, JSON header, float32-LE blobs in
    the header's declared order."""
    names = sorted(ckpt.params)
    header = {
        "model_config": ckpt.model_config.as_dict(),
        "meta": asdict(ckpt.meta),
        "vocab_hash": ckpt.vocab_hash,
        "params": [
            {"name": n, "shape": list(ckpt.params[n].data.shape), "dtype": "float32"}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(ckpt.params[n].data.astype("<f4").tobytes())


def load_checkpoint(path: str, expected_vocab: Optional[Vocab] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise TrainerError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        params: Dict[str, T.Tensor] = {}
        for spec in header["params"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(n * 4)
            arr = np.frombuffer(raw, dtype="<f4").reshape(spec["shape"]).copy()
            params[spec["name"]] = T.Tensor.param(arr)
    model_config = ModelConfig(**header["model_config"])
    if expected_vocab is not None:
        if len(expected_vocab) != model_config.vocab_size:
            raise TrainerError(
                f"vocab size mismatch: checkpoint {model_config.vocab_size}, "
                f"vocab {len(expected_vocab)}"
            )
        if header["vocab_hash"] and header["vocab_hash"] != vocab_hash(expected_vocab):
            raise TrainerError("vocab hash mismatch")
    meta = CheckpointMeta(**header["meta"])
    return Checkpoint(params, model_config, meta, header["vocab_hash"])
