"""Pretraining and finetuning loops: i.i.d. segment sampling, warmup+cosine
schedules, periodic validation, early stopping, and divergence handling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .corpus import CorpusStream, sample_finetune_batches, sample_segment_starts
from .model import Params, forward, init_model
from .optim import AdamWState, ScheduleConfig, adamw_step, lr_at

logger = logging.getLogger(__name__)


class EarlyStopper:
    """Stop as soon as validation worsens ``patience`` consecutive times."""

    def __init__(self, patience: int = 1):
        self.patience = patience
        self.best = math.inf
        self.fails = 0
        self.improved_ever = False

    def update(self, val_loss: float) -> bool:
        """Returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.fails = 0
            self.improved_ever = True
            return False
        self.fails += 1
        return self.fails >= self.patience


@dataclass
class TrainResult:
    params: Params
    steps_done: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    diverged: bool = False
    stopped_early: bool = False
    best_val: float = math.inf


def batch_loss(params: Params, batch: np.ndarray) -> ad.Tensor:
    """Mean per-token NLL over a [batch x segment] array, BOS-shifted."""
    bos = params.config.bos_id
    combined = None
    for row in batch:
        inputs = np.concatenate([[bos], row[:-1]])
        logits, _ = forward(params, inputs)
        nll = ad.softmax_cross_entropy(logits, row)
        combined = nll if combined is None else ad.concat(combined, nll, axis=0)
    return ad.reduce_mean(combined)


def evaluate_segments(params: Params, segments: np.ndarray) -> float:
    """Static mean NLL over fixed validation segments (no tape)."""
    total = 0.0
    count = 0
    for row in segments:
        inputs = np.concatenate([[params.config.bos_id], row[:-1]])
        logits, _ = forward(params, inputs)
        nll = ad.softmax_cross_entropy(logits, row)
        total += float(nll.data.sum())
        count += nll.size
    return total / count


def split_validation(stream: CorpusStream, fraction: float) -> tuple[CorpusStream, CorpusStream]:
    """Hold out the stream tail for validation."""
    cut = int(len(stream) * (1.0 - fraction))
    return stream.slice(0, cut), stream.slice(cut, len(stream))


def validation_segments(stream: CorpusStream, segment_length: int, count: int, seed: int) -> np.ndarray:
    starts = sample_segment_starts(stream, segment_length, count, seed)
    return np.stack([stream.tokens[s : s + segment_length] for s in starts])


def train_loop(
    params: Params,
    train_stream: CorpusStream,
    steps: int,
    batch_size: int,
    segment_length: int,
    schedule: ScheduleConfig,
    weight_decay: float = 0.0,
    seed: int = 0,
    val_segments: Optional[np.ndarray] = None,
    eval_every: int = 0,
    patience: int = 0,
    start_step: int = 0,
    fixed_starts: Optional[np.ndarray] = None,
    log_every: int = 0,
) -> TrainResult:
    """Run AdamW over i.i.d. segments.

    Divergence (non-finite loss) aborts, retaining the parameters from the
    last validation point (or the initial ones). With ``patience`` > 0 the
    best-validation parameters are restored at the end.
    """
    opt = AdamWState(params, lr=schedule.max_lr, weight_decay=weight_decay)
    opt.step = start_step
    stopper = EarlyStopper(patience) if patience > 0 else None
    result = TrainResult(params=params, steps_done=start_step)
    best_values: Optional[dict] = None
    last_good: dict = params.copy_values()

    if val_segments is not None and eval_every > 0:
        base_val = evaluate_segments(params, val_segments)
        result.val_losses.append(base_val)
        result.best_val = base_val
        best_values = params.copy_values()
        if stopper is not None:
            stopper.update(base_val)

    batches = sample_finetune_batches(
        train_stream, segment_length, batch_size, seed=seed, starts=fixed_starts
    )
    for step in range(start_step, start_step + steps):
        batch = next(batches)
        with Tape() as tape:
            loss = batch_loss(params, batch)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                logger.warning("divergence at step %d: loss=%r, aborting", step, loss_val)
                params.load_values(last_good)
                result.diverged = True
                return result
            tape.backward(loss)
        applied = adamw_step(params, opt, lr=lr_at(step, schedule))
        if not applied:
            logger.warning("non-finite gradients at step %d: update skipped", step)
        params.zero_grads()
        result.train_losses.append(loss_val)
        result.steps_done = step + 1
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f lr %.2e", step + 1, loss_val, lr_at(step, schedule))

        if val_segments is not None and eval_every > 0 and (step + 1 - start_step) % eval_every == 0:
            val = evaluate_segments(params, val_segments)
            result.val_losses.append(val)
            last_good = params.copy_values()
            if val < result.best_val:
                result.best_val = val
                best_values = params.copy_values()
            if stopper is not None and stopper.update(val):
                result.stopped_early = True
                break

    if best_values is not None and patience > 0:
        params.load_values(best_values)
    return result


def finetune_with_lr_sweep(
    base_values: dict,
    params: Params,
    train_stream: CorpusStream,
    amount: int,
    batch_size: int,
    segment_length: int,
    max_lrs: list[float],
    val_segments: np.ndarray,
    eval_every: int,
    seed: int = 0,
    epochs: int = 2,
    weight_decay: float = 0.0,
) -> tuple[dict, dict]:
    """Finetune on a fixed dataset of ``amount`` segments, sweeping maximum
    learning rates; returns (best parameter values, report).

    The cosine decay completes after ``epochs`` passes over the dataset;
    early stopping (patience 1) halts as soon as validation worsens. If no
    learning rate ever improves on the base model's validation loss, the base
    values are returned with a warning.
    """
    if amount <= 0:
        return {n: v.copy() for n, v in base_values.items()}, {
            "chosen_lr": None,
            "base_val": None,
            "best_val": None,
            "note": "finetune amount is zero; base model returned",
        }
    starts = sample_segment_starts(train_stream, segment_length, amount, seed)
    steps_per_epoch = max(1, amount // batch_size)
    total_steps = epochs * steps_per_epoch
    base_val = None
    best = (math.inf, None, None)
    per_lr = {}
    for lr in max_lrs:
        params.load_values(base_values)
        schedule = ScheduleConfig(
            kind="warmup_cosine",
            warmup_steps=max(1, total_steps // 20),
            total_steps=total_steps,
            max_lr=lr,
        )
        res = train_loop(
            params,
            train_stream,
            steps=total_steps,
            batch_size=batch_size,
            segment_length=segment_length,
            schedule=schedule,
            weight_decay=weight_decay,
            seed=seed,
            val_segments=val_segments,
            eval_every=eval_every,
            patience=1,
            fixed_starts=starts,
        )
        base_val = res.val_losses[0] if res.val_losses else None
        per_lr[lr] = res.best_val
        if res.best_val < best[0]:
            best = (res.best_val, lr, params.copy_values())

    if best[2] is None or (base_val is not None and best[0] >= base_val):
        logger.warning("finetuning never improved validation; returning base model")
        return {n: v.copy() for n, v in base_values.items()}, {
            "chosen_lr": None,
            "base_val": base_val,
            "best_val": best[0],
            "per_lr": per_lr,
            "note": "validation never improved",
        }
    return best[2], {
        "chosen_lr": best[1],
        "base_val": base_val,
        "best_val": best[0],
        "per_lr": per_lr,
    }
