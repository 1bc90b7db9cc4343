"""Decoder-only transformer with pre-LN blocks, GeLU MLPs and a relative
positional bias, evaluated either on a full window or incrementally against a
bounded KV cache.

The attention window is a hard bound: a query at absolute position p attends
to absolute positions [p - context_length + 1, p]. The cache keeps at most
``context_length`` past key/value rows per layer, evicting oldest first, and
tracks the absolute stream offset so distances stay exact under streaming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int
    d_model: int
    num_heads: int
    kv_size: int
    ffn_mult: int
    vocab_size: int
    context_length: int
    seed: int = 0

    def __post_init__(self):
        for name in ("num_blocks", "d_model", "num_heads", "kv_size", "ffn_mult", "vocab_size", "context_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")

    @property
    def attn_width(self) -> int:
        return self.num_heads * self.kv_size

    @property
    def ffn_width(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def bos_id(self) -> int:
        """Highest token id is reserved as the stream-start marker."""
        return self.vocab_size - 1


# Structural stand-ins for the paper-scale model family, scaled to a desk.
PRESETS = {
    "tiny": dict(num_blocks=2, d_model=64, num_heads=4, kv_size=16, ffn_mult=4),
    "small": dict(num_blocks=4, d_model=128, num_heads=4, kv_size=32, ffn_mult=4),
    "base": dict(num_blocks=6, d_model=256, num_heads=8, kv_size=32, ffn_mult=4),
}


def preset_config(name: str, vocab_size: int, context_length: int, seed: int = 0) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}")
    return ModelConfig(vocab_size=vocab_size, context_length=context_length, seed=seed, **PRESETS[name])


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Canonical parameter order: embedding, per-block tensors, final norm, unembedding."""
    d, aw, fw, v = config.d_model, config.attn_width, config.ffn_width, config.vocab_size
    shapes: list[tuple[str, tuple]] = [("tok_emb", (v, d))]
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1_gain", (d,)),
            (p + "ln1_bias", (d,)),
            (p + "wq", (d, aw)),
            (p + "wk", (d, aw)),
            (p + "wv", (d, aw)),
            (p + "wo", (aw, d)),
            (p + "ln2_gain", (d,)),
            (p + "ln2_bias", (d,)),
            (p + "w1", (d, fw)),
            (p + "b1", (fw,)),
            (p + "w2", (fw, d)),
            (p + "b2", (d,)),
        ]
    shapes += [("ln_f_gain", (d,)), ("ln_f_bias", (d,)), ("unemb", (d, v))]
    return shapes


def count_params(config: ModelConfig) -> int:
    d, aw, fw, v = config.d_model, config.attn_width, config.ffn_width, config.vocab_size
    per_block = 4 * d + 3 * d * aw + aw * d + d * fw + fw + fw * d + d
    return v * d + config.num_blocks * per_block + 2 * d + d * v


@dataclass
class Params:
    """Named parameter tensors in canonical order plus adapter state."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    lora: Optional["object"] = None  # LoraSpec, set by adapters.attach_lora

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.requires_grad]

    def trainable_count(self) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad)

    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy_values(self, names: Optional[Sequence[str]] = None) -> dict[str, np.ndarray]:
        names = list(names) if names is not None else list(self.tensors)
        return {n: self.tensors[n].data.copy() for n in names}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, arr in values.items():
            t = self.tensors[n]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch restoring {n}: {t.data.shape} vs {arr.shape}")
            t.data = arr.copy()


def init_model(config: ModelConfig, dtype=np.float32) -> Params:
    """Deterministic init from the config seed.

    Linear weights are N(0, 0.02^2); the residual-output projections (wo, w2)
    get an extra 1/sqrt(2 * num_blocks) to keep the residual stream tame.
    Norm gains start at one, all biases at zero.
    """
    rng = np.random.default_rng(config.seed)
    resid_scale = 1.0 / math.sqrt(2.0 * config.num_blocks)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        base = name.rsplit(".", 1)[-1]
        if base.endswith("_gain"):
            arr = np.ones(shape, dtype=dtype)
        elif base.endswith("_bias") or base in ("b1", "b2"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
            if base in ("wo", "w2"):
                arr *= resid_scale
            arr = arr.astype(dtype)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return Params(config=config, tensors=tensors)


class KVCache:
    """Per-layer bounded buffers of past keys/values plus the stream offset.

    Buffers are plain arrays [heads x len x kv]: entries were computed under
    whatever parameters were current at the time and are never recomputed, so
    they enter later attention as constants.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.keys: list[Optional[np.ndarray]] = [None] * config.num_blocks
        self.values: list[Optional[np.ndarray]] = [None] * config.num_blocks
        self.absolute_offset = 0

    def __len__(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[1]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        cap = self.config.context_length
        if self.keys[layer] is None:
            self.keys[layer] = k[:, -cap:].copy()
            self.values[layer] = v[:, -cap:].copy()
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)[:, -cap:]
            self.values[layer] = np.concatenate([self.values[layer], v], axis=1)[:, -cap:]

    def clear(self) -> None:
        self.keys = [None] * self.config.num_blocks
        self.values = [None] * self.config.num_blocks
        # absolute_offset keeps counting: it is the number of tokens consumed.


def head_slopes(num_heads: int, dtype=np.float32) -> np.ndarray:
    """Per-head distance penalty slopes 2^(-8h/H), h = 1..H."""
    return np.array([2.0 ** (-8.0 * (h + 1) / num_heads) for h in range(num_heads)], dtype=dtype)


def _relative_bias(config: ModelConfig, q_start: int, q_len: int, k_start: int, k_len: int, dtype) -> np.ndarray:
    """Additive attention bias: linear distance penalty, causal + window mask.

    Positions are absolute stream positions; distance = q_pos - k_pos. A key
    is visible iff 0 <= distance < context_length, so each query sees at most
    ``context_length`` keys including itself.
    """
    q_pos = np.arange(q_start, q_start + q_len, dtype=np.int64)[:, None]
    k_pos = np.arange(k_start, k_start + k_len, dtype=np.int64)[None, :]
    dist = q_pos - k_pos
    slopes = head_slopes(config.num_heads, dtype=np.float64)
    bias = -slopes[:, None, None] * dist[None, :, :].astype(np.float64)
    visible = (dist >= 0) & (dist < config.context_length)
    bias = np.where(visible[None, :, :], bias, -np.inf)
    return bias.astype(dtype)


def forward(
    params: Params,
    tokens: Sequence[int],
    cache: Optional[KVCache] = None,
) -> tuple[Tensor, Optional[KVCache]]:
    """Run the model over ``tokens``, optionally continuing a stream.

    Returns per-position logits [L x vocab] and the updated cache. Records
    onto the active tape if one is open, so the same code path serves both
    inference and training. Cached keys/values stay constant; only the
    current segment's activations carry gradients.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    length = int(tokens.shape[0])
    if length < 1:
        raise ValueError("forward needs at least one token")
    if length > cfg.context_length:
        raise ValueError(
            f"segment length {length} exceeds context_length {cfg.context_length}; stream with a KVCache instead"
        )
    dtype = params["tok_emb"].dtype
    offset = cache.absolute_offset if cache is not None else 0
    cache_len = len(cache) if cache is not None else 0
    scale_factor = 1.0 / math.sqrt(cfg.kv_size)

    bias = _relative_bias(
        cfg,
        q_start=offset,
        q_len=length,
        k_start=offset - cache_len,
        k_len=cache_len + length,
        dtype=dtype,
    )

    x = ad.embedding(params["tok_emb"], tokens)
    new_kv: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}."
        h = ad.layer_norm(x, params[p + "ln1_gain"], params[p + "ln1_bias"], eps=LN_EPS)
        q = _split_heads(ad.matmul(h, params[p + "wq"]), cfg, length)
        k = _split_heads(ad.matmul(h, params[p + "wk"]), cfg, length)
        v = _split_heads(ad.matmul(h, params[p + "wv"]), cfg, length)
        new_kv.append((k.data.copy(), v.data.copy()))
        if cache is not None and cache_len > 0:
            k = ad.concat(ad.constant(cache.keys[i], dtype=dtype), k, axis=1)
            v = ad.concat(ad.constant(cache.values[i], dtype=dtype), v, axis=1)
        attn = ad.attention(q, k, v, bias, scale_factor=scale_factor)
        merged = ad.reshape(ad.transpose(attn, (1, 0, 2)), (length, cfg.attn_width))
        x = ad.add(x, ad.matmul(merged, params[p + "wo"]))

        h2 = ad.layer_norm(x, params[p + "ln2_gain"], params[p + "ln2_bias"], eps=LN_EPS)
        m = ad.add(_mlp_matmul(params, p, "w1", h2), params[p + "b1"])
        m = ad.gelu(m)
        m = ad.add(_mlp_matmul(params, p, "w2", m), params[p + "b2"])
        x = ad.add(x, m)

    x = ad.layer_norm(x, params["ln_f_gain"], params["ln_f_bias"], eps=LN_EPS)
    logits = ad.matmul(x, params["unemb"])

    if cache is not None:
        for i, (k_arr, v_arr) in enumerate(new_kv):
            cache.append(i, k_arr, v_arr)
        cache.absolute_offset += length
    return logits, cache


def _split_heads(x: Tensor, cfg: ModelConfig, length: int) -> Tensor:
    return ad.transpose(ad.reshape(x, (length, cfg.num_heads, cfg.kv_size)), (1, 0, 2))


def _mlp_matmul(params: Params, prefix: str, which: str, x: Tensor) -> Tensor:
    """MLP weight application, routed through the low-rank adapter when present."""
    out = ad.matmul(x, params[prefix + which])
    lora = params.lora
    if lora is not None:
        a = params[f"{prefix}{which}.lora_a"]
        b = params[f"{prefix}{which}.lora_b"]
        out = ad.add(out, ad.scale(ad.matmul(ad.matmul(x, a), b), lora.alpha / lora.rank))
    return out


def matmul_param_count(config: ModelConfig) -> int:
    """Weight-matrix entries touched per token by one forward pass."""
    d, aw, fw, v = config.d_model, config.attn_width, config.ffn_width, config.vocab_size
    return config.num_blocks * (3 * d * aw + aw * d + d * fw + fw * d) + d * v


def count_flops_forward(config: ModelConfig, new_tokens: int, attended: int) -> float:
    """FLOPs to encode ``new_tokens`` with ``attended`` visible keys each.

    Weight matmuls cost 2 FLOPs per entry per token; attention adds
    4 * blocks * heads * kv * attended per token (QK^T plus PV, multiply-add
    counted as two). The model is for comparisons, not absolute accuracy.
    """
    if attended > config.context_length:
        raise ValueError(f"attended {attended} exceeds context_length {config.context_length}")
    if new_tokens == 0:
        return 0.0
    per_token = 2.0 * matmul_param_count(config) + 4.0 * config.num_blocks * config.num_heads * config.kv_size * attended
    return float(new_tokens) * per_token
