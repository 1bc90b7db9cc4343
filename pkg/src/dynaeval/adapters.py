"""Restrict which parameters train: low-rank adapters on the MLP matrices,
or freezing everything outside a chosen set of blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, Params


@dataclass(frozen=True)
class LoraSpec:
    """Low-rank additive adapters W x + (alpha/r) B(A x) on every block's MLP
    matrices. Only A and B train; base weights freeze. B starts at zero so the
    adapted model's first forward equals the base model exactly."""

    rank: int
    alpha: float = 0.0  # 0 means "default to rank", i.e. effective scale 1

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha == 0.0:
            object.__setattr__(self, "alpha", float(self.rank))


@dataclass(frozen=True)
class FreezeMask:
    """Block indices whose parameters stay trainable; everything else freezes.
    ``include_embeddings`` additionally unfreezes the token embedding,
    unembedding and final norm (full-finetuning behavior when all blocks are
    listed)."""

    blocks: tuple
    include_embeddings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(sorted(set(self.blocks))))


def lora_param_count(config: ModelConfig, rank: int) -> int:
    """Closed form: blocks * 2 matrices * r * (d_model + ffn_width)."""
    return config.num_blocks * 2 * rank * (config.d_model + config.ffn_width)


def attach_lora(params: Params, spec: LoraSpec) -> Params:
    """Augment ``params`` with adapter tensors and freeze everything else."""
    cfg = params.config
    max_rank = min(cfg.d_model, cfg.ffn_width)
    if spec.rank > max_rank:
        raise ValueError(
            f"LoRA rank {spec.rank} exceeds min(d_model, ffn_width) = {max_rank}"
        )
    if params.lora is not None:
        raise ValueError("params already carry a LoRA adapter")
    rng = np.random.default_rng([cfg.seed, 0x10A])
    dtype = params["tok_emb"].dtype
    tensors = dict(params.tensors)
    for t in tensors.values():
        t.requires_grad = False
    for i in range(cfg.num_blocks):
        for which, (f_in, f_out) in (
            ("w1", (cfg.d_model, cfg.ffn_width)),
            ("w2", (cfg.ffn_width, cfg.d_model)),
        ):
            a = rng.normal(0.0, 0.02, size=(f_in, spec.rank)).astype(dtype)
            b = np.zeros((spec.rank, f_out), dtype=dtype)
            tensors[f"blocks.{i}.{which}.lora_a"] = Tensor(a, requires_grad=True, dtype=dtype)
            tensors[f"blocks.{i}.{which}.lora_b"] = Tensor(b, requires_grad=True, dtype=dtype)
    return Params(config=cfg, tensors=tensors, lora=spec)


def merge_lora(params: Params) -> Params:
    """Fold the adapter into the base weights; returns plain full params."""
    if params.lora is None:
        raise ValueError("no LoRA adapter to merge")
    spec = params.lora
    factor = spec.alpha / spec.rank
    tensors: dict[str, Tensor] = {}
    for name, t in params.tensors.items():
        if ".lora_" in name:
            continue
        arr = t.data.copy()
        if name.endswith((".w1", ".w2")):
            a = params.tensors[name + ".lora_a"].data
            b = params.tensors[name + ".lora_b"].data
            arr = arr + factor * (a @ b)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return Params(config=params.config, tensors=tensors, lora=None)


def apply_freeze_mask(params: Params, mask: FreezeMask) -> Params:
    """Set trainable flags in place so gradients and optimizer state exist
    only for the chosen blocks."""
    cfg = params.config
    if not mask.blocks and not mask.include_embeddings:
        raise ValueError("freeze mask selects nothing to train")
    for b in mask.blocks:
        if not 0 <= b < cfg.num_blocks:
            raise ValueError(f"freeze mask block {b} outside [0, {cfg.num_blocks})")
    chosen = {f"blocks.{b}." for b in mask.blocks}
    for name, t in params.tensors.items():
        if name.startswith("blocks."):
            prefix = name.split(".")[1]
            t.requires_grad = f"blocks.{prefix}." in chosen
        else:
            t.requires_grad = mask.include_embeddings
    return params
