"""Small decoder-only transformer built on the tape engine.

Pre-norm blocks with RMS normalization, learned absolute positions, causal
attention, GELU MLP. Training forwards build the autodiff tape; inference
uses a tape-free numpy path with a KV cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["ModelConfig", "init_params", "forward_logits", "sequence_loss", "InferenceSession"]


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 512
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    ff_mult: int = 4
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 1 or self.context_len < 2:
            raise ValueError("invalid model dimensions")

    def as_dict(self) -> Dict:
        return asdict(self)


def init_params(config: ModelConfig, dtype=np.float32) -> Dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_model * config.ff_mult
    s = config.init_scale

    def normal(shape):
        return Tensor.param(rng.normal(0.0, s, size=shape).astype(dtype))

    params: Dict[str, Tensor] = {
        "tok_emb": normal((config.vocab_size, d)),
        "pos_emb": normal((config.context_len, d)),
        "final_norm_g": Tensor.param(np.ones(d, dtype=dtype)),
        "lm_head": normal((d, config.vocab_size)),
    }
    for i in range(config.n_layers):
        params[f"l{i}.attn_norm_g"] = Tensor.param(np.ones(d, dtype=dtype))
        params[f"l{i}.wq"] = normal((d, d))
        params[f"l{i}.wk"] = normal((d, d))
        params[f"l{i}.wv"] = normal((d, d))
        params[f"l{i}.wo"] = normal((d, d))
        params[f"l{i}.mlp_norm_g"] = Tensor.param(np.ones(d, dtype=dtype))
        params[f"l{i}.w1"] = normal((d, ff))
        params[f"l{i}.w2"] = normal((ff, d))
    return params


def _causal_keep(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def _attention(x: Tensor, params: Dict[str, Tensor], layer: int, config: ModelConfig) -> Tensor:
    # x: [B, T, d]
    b, t, d = x.shape
    h, hd = config.n_heads, config.d_model // config.n_heads
    q = T.matmul(x, params[f"l{layer}.wq"]).reshape(b, t, h, hd).swapaxes(1, 2)
    k = T.matmul(x, params[f"l{layer}.wk"]).reshape(b, t, h, hd).swapaxes(1, 2)
    v = T.matmul(x, params[f"l{layer}.wv"]).reshape(b, t, h, hd).swapaxes(1, 2)
    scores = T.matmul(q, k.swapaxes(2, 3)) * (1.0 / math.sqrt(hd))  # [B, H, T, T]
    scores = T.where_const(scores, _causal_keep(t), -1e9)
    att = T.softmax(scores, axis=-1)
    out = T.matmul(att, v)  # [B, H, T, hd]
    out = out.swapaxes(1, 2).reshape(b, t, d)
    return T.matmul(out, params[f"l{layer}.wo"])


def _mlp(x: Tensor, params: Dict[str, Tensor], layer: int) -> Tensor:
    h = T.gelu(T.matmul(x, params[f"l{layer}.w1"]))
    return T.matmul(h, params[f"l{layer}.w2"])


def forward_logits_batch(
    params: Dict[str, Tensor], ids: np.ndarray, config: ModelConfig
) -> Tensor:
    """Causal logits for a [B, T] id batch; returns Tensor [B, T, V]."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be [B, T]")
    b, t = ids.shape
    if t > config.context_len:
        raise ValueError(f"sequence length {t} exceeds context {config.context_len}")
    tok = T.embedding(params["tok_emb"], ids)  # [B, T, d]
    pos = T.embedding(params["pos_emb"], np.arange(t))  # [T, d]
    x = tok + pos
    for i in range(config.n_layers):
        x = x + _attention(T.rms_norm(x, params[f"l{i}.attn_norm_g"]), params, i, config)
        x = x + _mlp(T.rms_norm(x, params[f"l{i}.mlp_norm_g"]), params, i)
    x = T.rms_norm(x, params["final_norm_g"])
    return T.matmul(x, params["lm_head"])


def forward_logits(params: Dict[str, Tensor], ids: Sequence[int], config: ModelConfig) -> Tensor:
    """Causal logits for one sequence: logits[t] depends only on ids[0..t]."""
    arr = np.asarray(ids).reshape(1, -1)
    return forward_logits_batch(params, arr, config).reshape(arr.shape[1], config.vocab_size)


def sequence_loss(
    params: Dict[str, Tensor],
    ids: Sequence[int],
    mask_weights: Sequence[float],
    config: ModelConfig,
) -> T.CrossEntropyResult:
    """Next-token loss over unmasked target positions.

    mask_weights align with sequence tokens: the weight of token t says
    whether predicting token t (from its prefix) counts toward the loss.
    """
    ids = np.asarray(ids)
    if ids.shape[0] < 2:
        raise ValueError("need at least two tokens for next-token loss")
    w = np.asarray(mask_weights)
    if w.shape != ids.shape:
        raise ValueError("mask length must match sequence length")
    logits = forward_logits(params, ids[:-1], config)
    return T.masked_cross_entropy(logits, ids[1:], w[1:])


class InferenceSession:
    """Tape-free incremental decoding with a KV cache for one sequence."""

    def __init__(self, params: Dict[str, Tensor], config: ModelConfig):
        self.config = config
        self.p = {name: p.data for name, p in params.items()}
        self._k: List[List[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self._v: List[List[np.ndarray]] = [[] for _ in range(config.n_layers)]
        self._pos = 0

    def __len__(self) -> int:
        return self._pos

    def _rms(self, x: np.ndarray, g: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
        return x / r * g

    def step(self, token: int) -> np.ndarray:
        """Feed one token, return next-token logits [V]."""
        cfg = self.config
        if self._pos >= cfg.context_len:
            raise ValueError("context length exhausted")
        h_heads, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = self.p["tok_emb"][token] + self.p["pos_emb"][self._pos]  # [d]
        for i in range(cfg.n_layers):
            xn = self._rms(x, self.p[f"l{i}.attn_norm_g"])
            q = (xn @ self.p[f"l{i}.wq"]).reshape(h_heads, hd)
            k = (xn @ self.p[f"l{i}.wk"]).reshape(h_heads, hd)
            v = (xn @ self.p[f"l{i}.wv"]).reshape(h_heads, hd)
            self._k[i].append(k)
            self._v[i].append(v)
            ks = np.stack(self._k[i], axis=1)  # [H, t, hd]
            vs = np.stack(self._v[i], axis=1)
            scores = np.einsum("hd,htd->ht", q, ks) / math.sqrt(hd)
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            attn = np.einsum("ht,htd->hd", w, vs).reshape(cfg.d_model)
            x = x + attn @ self.p[f"l{i}.wo"]
            xn = self._rms(x, self.p[f"l{i}.mlp_norm_g"])
            hidden = xn @ self.p[f"l{i}.w1"]
            phi = 0.5 * (1.0 + _erf_vec(hidden / math.sqrt(2.0)))
            x = x + (hidden * phi) @ self.p[f"l{i}.w2"]
        xn = self._rms(x, self.p["final_norm_g"])
        self._pos += 1
        return xn @ self.p["lm_head"]

    def prefill(self, ids: Sequence[int]) -> np.ndarray:
        logits = None
        for t in ids:
            logits = self.step(int(t))
        if logits is None:
            raise ValueError("prefill needs at least one token")
        return logits


def _erf_vec(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return erf(x)
