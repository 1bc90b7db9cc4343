"""End-to-end run orchestration: pretrain -> finetune -> evaluate, with
content-addressed caching of the training phases so sweep grids reuse work."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .adapters import FreezeMask, LoraSpec, apply_freeze_mask, attach_lora
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    build_adapter,
    build_engine_config,
    build_model_config,
    build_stream,
    build_tokenizer,
)
from .corpus import CorpusStream
from .engines import EngineConfig, EvalResult, evaluate, write_jsonl
from .metrics import ParetoPoint, mean_nll, save_json, total_nll
from .model import ModelConfig, Params, init_model
from .optim import AdamWState, ScheduleConfig
from .train import finetune_with_lr_sweep, split_validation, train_loop, validation_segments

logger = logging.getLogger(__name__)


def _hash_obj(obj) -> str:
    return hashlib.blake2b(
        json.dumps(obj, sort_keys=True, default=str).encode(), digest_size=8
    ).hexdigest()


def pretrain_cache_key(cfg: dict) -> str:
    relevant = {k: cfg.get(k) for k in ("model", "tokenizer", "pretrain", "seed")}
    relevant["data"] = cfg.get("data", {}).get("pretrain")
    return _hash_obj(relevant)


def finetune_cache_key(cfg: dict) -> str:
    relevant = {k: cfg.get(k) for k in ("model", "tokenizer", "pretrain", "finetune", "seed")}
    relevant["data"] = {
        "pretrain": cfg.get("data", {}).get("pretrain"),
        "finetune": cfg.get("data", {}).get("finetune"),
    }
    return _hash_obj(relevant)


def run_pretrain(cfg: dict, out_path, resume: Optional[str] = None) -> dict:
    """Train from init (or resume) with warmup+cosine; write a checkpoint."""
    tokenizer = build_tokenizer(cfg)
    model_cfg = build_model_config(cfg, tokenizer)
    pt = cfg["pretrain"]
    stream = build_stream(cfg, "pretrain", tokenizer)
    train_stream, val_stream = split_validation(stream, pt["val_fraction"])
    start_step = 0
    if resume is not None:
        params, start_step = load_checkpoint(resume)
        if params.config != model_cfg:
            raise ConfigError("resume checkpoint config does not match run config")
    else:
        params = init_model(model_cfg)
    val_segments = validation_segments(
        val_stream, pt["segment_length"], pt["val_segments"], seed=cfg["seed"] + 1
    )
    schedule = ScheduleConfig(
        kind="warmup_cosine",
        warmup_steps=pt["warmup_steps"],
        total_steps=max(pt["warmup_steps"], start_step + pt["steps"]),
        max_lr=pt["max_lr"],
    )
    result = train_loop(
        params,
        train_stream,
        steps=pt["steps"],
        batch_size=pt["batch_size"],
        segment_length=pt["segment_length"],
        schedule=schedule,
        weight_decay=pt["weight_decay"],
        seed=cfg["seed"],
        val_segments=val_segments,
        eval_every=pt["eval_every"],
        patience=0,
        start_step=start_step,
        log_every=max(1, pt["steps"] // 10) if pt["steps"] else 0,
    )
    save_checkpoint(out_path, params, step=result.steps_done)
    return {
        "checkpoint": str(out_path),
        "steps_done": result.steps_done,
        "diverged": result.diverged,
        "final_train_loss": result.train_losses[-1] if result.train_losses else None,
        "val_losses": result.val_losses,
    }


def run_finetune(cfg: dict, base_ckpt, out_path) -> dict:
    """Finetune a checkpoint on the finetune corpus with an LR sweep and early
    stopping; amount 0 copies the base checkpoint through unchanged."""
    tokenizer = build_tokenizer(cfg)
    ft = cfg["finetune"]
    params, step = load_checkpoint(base_ckpt)
    base_values = params.copy_values()
    if ft["amount"] <= 0:
        save_checkpoint(out_path, params, step=step)
        return {"checkpoint": str(out_path), "note": "finetune amount 0; checkpoint copied", "chosen_lr": None}
    stream = build_stream(cfg, "finetune", tokenizer)
    train_stream, val_stream = split_validation(stream, ft["val_fraction"])
    val_segments = validation_segments(
        val_stream, ft["segment_length"], ft["val_segments"], seed=cfg["seed"] + 2
    )
    best_values, report = finetune_with_lr_sweep(
        base_values,
        params,
        train_stream,
        amount=ft["amount"],
        batch_size=ft["batch_size"],
        segment_length=ft["segment_length"],
        max_lrs=[float(x) for x in ft["max_lrs"]],
        val_segments=val_segments,
        eval_every=ft["eval_every"],
        seed=cfg["seed"],
        epochs=ft["epochs"],
        weight_decay=ft["weight_decay"],
    )
    params.load_values(best_values)
    save_checkpoint(out_path, params, step=step)
    report["checkpoint"] = str(out_path)
    return report


def _attach_adapter(params: Params, cfg: dict) -> Params:
    adapter = build_adapter(cfg)
    if adapter is None:
        return params
    if isinstance(adapter, LoraSpec):
        return attach_lora(params, adapter)
    return apply_freeze_mask(params, adapter)


def run_eval(cfg: dict, checkpoint: Optional[str], out_dir) -> dict:
    """Evaluate a checkpoint (or a fresh init) with the configured engine.

    Sweeps engine.lr_sweep when present, keeps the best learning rate (as
    measured by mean NLL), writes records.jsonl and summary.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = build_tokenizer(cfg)
    model_cfg = build_model_config(cfg, tokenizer)
    if checkpoint is not None:
        params, _ = load_checkpoint(checkpoint)
        if params.config != model_cfg:
            raise ConfigError(
                f"checkpoint model {params.config} does not match run config {model_cfg}"
            )
    else:
        params = init_model(model_cfg)
    params = _attach_adapter(params, cfg)
    base_values = params.copy_values()
    engine_cfg = build_engine_config(cfg)
    engine_cfg.validate(model_cfg.context_length)
    stream = build_stream(cfg, "eval", tokenizer)

    lr_sweep = cfg.get("engine", {}).get("lr_sweep")
    lrs = [float(x) for x in lr_sweep] if lr_sweep else [engine_cfg.online_lr]
    best = None
    sweep_report = {}
    for lr in lrs:
        params.load_values(base_values)
        run_cfg = copy.deepcopy(engine_cfg)
        run_cfg.online_lr = lr
        opt = AdamWState(params, lr=lr) if engine_cfg.strategy != "static" else None
        result = evaluate(params, stream, run_cfg, opt)
        m = mean_nll(result.records)
        sweep_report[str(lr)] = m
        if best is None or m < best[0]:
            best = (m, lr, result)

    m, lr, result = best
    write_jsonl(result.records, out_dir / "records.jsonl")
    summary = {
        "mean_nll": m,
        "total_nll": total_nll(result.records),
        "num_tokens": len(result.records),
        "total_flops": result.stats.total_flops,
        "updates_applied": result.stats.updates_applied,
        "tokens_encoded": result.stats.tokens_encoded,
        "increments": result.stats.increments,
        "resets": result.stats.resets,
        "online_lr": lr,
        "lr_sweep": sweep_report if lr_sweep else None,
        "records": str(out_dir / "records.jsonl"),
        "config": cfg,
    }
    save_json(summary, out_dir / "summary.json")
    return summary


def ensure_checkpoints(cfg: dict, cache_dir) -> Optional[str]:
    """Make sure the pretrain/finetune artifacts for ``cfg`` exist, returning
    the checkpoint to evaluate (None when both phases are disabled)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ckpt = None
    if cfg["pretrain"]["steps"] > 0:
        pre = cache_dir / f"pretrain-{pretrain_cache_key(cfg)}.ckpt"
        if not pre.exists():
            logger.info("pretraining -> %s", pre)
            run_pretrain(cfg, pre)
        ckpt = str(pre)
    if cfg["finetune"]["amount"] > 0:
        if ckpt is None:
            raise ConfigError("finetune requested but no pretrain phase or checkpoint")
        fin = cache_dir / f"finetune-{finetune_cache_key(cfg)}.ckpt"
        if not fin.exists():
            logger.info("finetuning -> %s", fin)
            run_finetune(cfg, ckpt, fin)
        ckpt = str(fin)
    return ckpt


def run_point(cfg: dict, label: str, out_dir, cache_dir) -> ParetoPoint:
    """One sweep point: ensure training artifacts, evaluate, return the
    (FLOPs, mean NLL) measurement."""
    ckpt = ensure_checkpoints(cfg, cache_dir)
    summary = run_eval(cfg, ckpt, Path(out_dir) / label)
    return ParetoPoint(
        flops_total=float(summary["total_flops"]),
        mean_nll=float(summary["mean_nll"]),
        label=label,
    )
