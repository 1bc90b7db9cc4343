"""Evaluation engines over long token streams: static (frozen parameters),
overlapping windows, and KV-cache streaming with online gradient updates.

Every engine walks the stream in order, records exactly one loss per stream
token (in nats), accounts FLOPs as it goes, and optionally resets to a
snapshot at document boundaries. A reserved BOS token is prepended once at
stream start (and again after each reset) so every real token has a
prediction; model inputs are therefore the stream shifted right by one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .corpus import CorpusStream
from .model import KVCache, Params, count_flops_forward, forward
from .optim import AdamWState, adamw_step, throttled_update

STRATEGIES = ("static", "overlapping", "txl_stream")
RESET_POLICIES = ("none", "at_document_boundary")


@dataclass
class EngineConfig:
    strategy: str = "txl_stream"
    window: int = 0  # overlapping: total tokens per invocation
    overlap: int = 0  # overlapping: trailing tokens re-fed as context
    increment: int = 32  # txl_stream/static: new tokens per forward
    update_frequency: int = 1  # update on every nth increment
    reset_policy: str = "none"
    online_lr: float = 0.0
    accumulate_skipped: bool = False  # accumulate grads across skipped increments
    carry_cache: bool = True  # txl_stream: False clears the cache every increment

    def validate(self, context_length: int) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.reset_policy not in RESET_POLICIES:
            raise ValueError(f"unknown reset policy {self.reset_policy!r}")
        if self.update_frequency < 1:
            raise ValueError(f"update_frequency must be >= 1, got {self.update_frequency}")
        if self.online_lr < 0:
            raise ValueError(f"online_lr must be >= 0, got {self.online_lr}")
        if self.strategy == "overlapping":
            if not 0 <= self.overlap < self.window:
                raise ValueError(f"need 0 <= overlap < window, got overlap={self.overlap} window={self.window}")
            if self.window > context_length:
                raise ValueError(f"window {self.window} exceeds context_length {context_length}")
        else:
            if not 1 <= self.increment <= context_length:
                raise ValueError(f"need 1 <= increment <= context_length, got {self.increment}")


@dataclass
class EvalRecord:
    token_position: int
    document_id: int
    nll: float
    flops_cumulative: float
    updated: bool

    def to_json_obj(self) -> dict:
        return {
            "pos": self.token_position,
            "doc": self.document_id,
            "nll": self.nll,
            "flops": self.flops_cumulative,
            "updated": self.updated,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EvalRecord":
        return cls(
            token_position=int(obj["pos"]),
            document_id=int(obj["doc"]),
            nll=float(obj["nll"]),
            flops_cumulative=float(obj["flops"]),
            updated=bool(obj["updated"]),
        )


@dataclass
class RunStats:
    increments: int = 0
    tokens_encoded: int = 0
    backward_increments: int = 0
    updates_applied: int = 0
    updates_skipped_nonfinite: int = 0
    resets: int = 0
    total_flops: float = 0.0


@dataclass
class EvalResult:
    records: list[EvalRecord]
    stats: RunStats

    def nll_values(self) -> np.ndarray:
        return np.array([r.nll for r in self.records], dtype=np.float64)

    def mean_nll(self) -> float:
        return float(self.nll_values().mean())


class Snapshot:
    """Copy of trainable parameters and optimizer state at evaluation start."""

    def __init__(self, params: Params, opt: Optional[AdamWState]):
        self._names = params.trainable_names()
        self._values = params.copy_values(self._names)
        self._opt = opt.snapshot() if opt is not None else None

    def restore(self, params: Params, opt: Optional[AdamWState]) -> None:
        params.load_values(self._values)
        if opt is not None and self._opt is not None:
            opt.restore(self._opt)


def _spans(stream: CorpusStream, split_at_boundaries: bool) -> list[tuple[int, int]]:
    n = len(stream.tokens)
    if not split_at_boundaries:
        return [(0, n)] if n else []
    bounds = [b for b in stream.doc_boundaries if 0 < b < n]
    edges = [0] + bounds + [n]
    return [(a, b) for a, b in zip(edges, edges[1:]) if a < b]


def _validate_stream(stream: CorpusStream, params: Params) -> None:
    toks = np.asarray(stream.tokens)
    if toks.size and int(toks.max()) >= params.config.bos_id:
        raise ValueError(
            f"stream token {int(toks.max())} collides with reserved BOS id {params.config.bos_id}"
        )


def evaluate(
    params: Params,
    stream: CorpusStream,
    config: EngineConfig,
    opt: Optional[AdamWState] = None,
) -> EvalResult:
    """Dispatch on strategy. Static runs need no optimizer."""
    config.validate(params.config.context_length)
    _validate_stream(stream, params)
    if config.strategy == "overlapping":
        if opt is None:
            raise ValueError("overlapping evaluation needs an optimizer")
        return evaluate_overlapping(params, stream, config, opt)
    if config.strategy == "txl_stream":
        if opt is None:
            raise ValueError("txl_stream evaluation needs an optimizer")
        return evaluate_txl_stream(params, stream, config, opt)
    return evaluate_static(params, stream, config)


def evaluate_static(params: Params, stream: CorpusStream, config: EngineConfig) -> EvalResult:
    """Frozen-parameter comparator using the streaming forward mechanics."""
    return _stream_loop(params, stream, config, opt=None, dynamic=False)


def evaluate_txl_stream(
    params: Params, stream: CorpusStream, config: EngineConfig, opt: AdamWState
) -> EvalResult:
    """Process the stream in increments against a live KV cache; every nth
    increment backprops its mean NLL and applies one optimizer update. Cache
    entries computed under older parameters are kept as-is."""
    return _stream_loop(params, stream, config, opt=opt, dynamic=True)


def _stream_loop(
    params: Params,
    stream: CorpusStream,
    config: EngineConfig,
    opt: Optional[AdamWState],
    dynamic: bool,
) -> EvalResult:
    cfg = params.config
    tokens = np.asarray(stream.tokens, dtype=np.int64)
    doc_ids = np.asarray(stream.doc_ids, dtype=np.int64)
    records: list[EvalRecord] = []
    stats = RunStats()
    if tokens.size == 0:
        return EvalResult(records, stats)

    resetting = config.reset_policy == "at_document_boundary"
    snapshot = Snapshot(params, opt) if resetting and dynamic else None
    p_train = params.trainable_count()
    flops = 0.0
    accum_count = 0

    for span_idx, (start, end) in enumerate(_spans(stream, resetting)):
        if span_idx > 0:
            if snapshot is not None:
                snapshot.restore(params, opt)
                params.zero_grads()
                accum_count = 0
            stats.resets += 1
        cache = KVCache(cfg)
        prev_token = cfg.bos_id
        pos = start
        while pos < end:
            chunk = tokens[pos : min(pos + config.increment, end)]
            k = int(chunk.shape[0])
            inputs = np.concatenate([[prev_token], chunk[:-1]])
            do_update = dynamic and throttled_update(stats.increments, config.update_frequency)
            need_grad = dynamic and (do_update or config.accumulate_skipped)
            attended = min(cfg.context_length, len(cache) + k)
            fwd_cost = count_flops_forward(cfg, k, attended)

            if need_grad:
                with Tape() as tape:
                    logits, _ = forward(params, inputs, cache)
                    nll = ad.softmax_cross_entropy(logits, chunk)
                    loss = ad.reduce_mean(nll)
                    tape.backward(loss)
                accum_count += 1
                stats.backward_increments += 1
                flops += 3.0 * fwd_cost
            else:
                logits, _ = forward(params, inputs, cache)
                nll = ad.softmax_cross_entropy(logits, chunk)
                flops += fwd_cost

            updated = False
            if do_update:
                if config.accumulate_skipped and accum_count > 1:
                    for name in params.trainable_names():
                        g = params[name].grad
                        if g is not None:
                            params[name].grad = g / g.dtype.type(accum_count)
                updated = adamw_step(params, opt, lr=config.online_lr)
                if updated:
                    stats.updates_applied += 1
                    flops += 10.0 * p_train
                else:
                    stats.updates_skipped_nonfinite += 1
                params.zero_grads()
                accum_count = 0

            nll_vals = nll.data.astype(np.float64)
            for j in range(k):
                records.append(
                    EvalRecord(
                        token_position=int(pos + j),
                        document_id=int(doc_ids[pos + j]),
                        nll=float(nll_vals[j]),
                        flops_cumulative=flops,
                        updated=updated,
                    )
                )
            stats.increments += 1
            stats.tokens_encoded += k
            prev_token = int(chunk[-1])
            pos += k
            if not config.carry_cache:
                cache = KVCache(cfg)

    stats.total_flops = flops
    return EvalResult(records, stats)


def evaluate_overlapping(
    params: Params, stream: CorpusStream, config: EngineConfig, opt: AdamWState
) -> EvalResult:
    """Sliding full-context windows that advance by (window - overlap).

    Each token's loss is recorded at its first encounter only; the gradient
    step after a window uses the mean NLL over all of that window's tokens,
    so overlapped tokens contribute to consecutive updates by design.
    """
    cfg = params.config
    tokens = np.asarray(stream.tokens, dtype=np.int64)
    doc_ids = np.asarray(stream.doc_ids, dtype=np.int64)
    records: list[EvalRecord] = []
    stats = RunStats()
    if tokens.size == 0:
        return EvalResult(records, stats)

    resetting = config.reset_policy == "at_document_boundary"
    snapshot = Snapshot(params, opt) if resetting else None
    stride = config.window - config.overlap
    p_train = params.trainable_count()
    flops = 0.0
    accum_count = 0

    for span_idx, (span_start, span_end) in enumerate(_spans(stream, resetting)):
        if span_idx > 0:
            if snapshot is not None:
                snapshot.restore(params, opt)
                params.zero_grads()
                accum_count = 0
            stats.resets += 1
        start = span_start
        recorded_upto = span_start
        while recorded_upto < span_end:
            end = min(start + config.window, span_end)
            window_tokens = tokens[start:end]
            w_len = int(window_tokens.shape[0])
            prev = cfg.bos_id if start == span_start else int(tokens[start - 1])
            inputs = np.concatenate([[prev], window_tokens[:-1]])
            do_update = throttled_update(stats.increments, config.update_frequency)
            need_grad = do_update or config.accumulate_skipped
            fwd_cost = count_flops_forward(cfg, w_len, attended=w_len)

            if need_grad:
                with Tape() as tape:
                    logits, _ = forward(params, inputs, cache=None)
                    nll = ad.softmax_cross_entropy(logits, window_tokens)
                    loss = ad.reduce_mean(nll)
                    tape.backward(loss)
                accum_count += 1
                stats.backward_increments += 1
                flops += 3.0 * fwd_cost
            else:
                logits, _ = forward(params, inputs, cache=None)
                nll = ad.softmax_cross_entropy(logits, window_tokens)
                flops += fwd_cost

            updated = False
            if do_update:
                if config.accumulate_skipped and accum_count > 1:
                    for name in params.trainable_names():
                        g = params[name].grad
                        if g is not None:
                            params[name].grad = g / g.dtype.type(accum_count)
                updated = adamw_step(params, opt, lr=config.online_lr)
                if updated:
                    stats.updates_applied += 1
                    flops += 10.0 * p_train
                else:
                    stats.updates_skipped_nonfinite += 1
                params.zero_grads()
                accum_count = 0

            nll_vals = nll.data.astype(np.float64)
            for abs_pos in range(recorded_upto, end):
                records.append(
                    EvalRecord(
                        token_position=int(abs_pos),
                        document_id=int(doc_ids[abs_pos]),
                        nll=float(nll_vals[abs_pos - start]),
                        flops_cumulative=flops,
                        updated=updated,
                    )
                )
            stats.increments += 1
            stats.tokens_encoded += w_len
            recorded_upto = end
            start += stride

    stats.total_flops = flops
    return EvalResult(records, stats)


def apply_reset_policy(params: Params, opt: Optional[AdamWState], cache: KVCache, snapshot: Snapshot) -> KVCache:
    """Restore trainable parameters and optimizer moments to the snapshot and
    clear the cache; loss history is untouched. Returns the fresh cache."""
    snapshot.restore(params, opt)
    params.zero_grads()
    fresh = KVCache(cache.config)
    return fresh


def write_jsonl(records: list[EvalRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json_obj()) + "\n")


def read_jsonl(path) -> list[EvalRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EvalRecord.from_json_obj(json.loads(line)))
    return records
