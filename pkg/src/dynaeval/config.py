"""Run configuration: a JSON document with a named field for every knob.

Schema (all sections optional unless a command needs them):

{
  "seed": 0,
  "out_dir": "runs/exp",
  "model": {"preset": "tiny"} or explicit ModelConfig fields;
           "vocab_size" defaults to tokenizer vocabulary + 1 (reserved BOS),
           "context_length" defaults to 64,
  "tokenizer": {"kind": "byte"} | {"kind": "bpe", "vocab": 512,
                "train_manifest": "..."} | {"kind": "raw", "vocab": 16},
  "data": {"pretrain": SOURCE, "finetune": SOURCE, "eval": SOURCE},
  "pretrain": {"steps", "batch_size", "segment_length", "max_lr",
               "warmup_steps", "weight_decay", "eval_every", "val_fraction"},
  "finetune": {"amount", "batch_size", "segment_length", "max_lrs",
               "epochs", "eval_every", "val_fraction", "weight_decay"},
  "engine": EngineConfig fields plus optional "lr_sweep": [lr, ...],
  "adapter": null | {"kind": "lora", "rank": 8, "alpha": 0}
                  | {"kind": "freeze", "blocks": [1], "include_embeddings": false}
}

SOURCE is {"manifest": "path"} for text corpora or
{"synthetic": {"seed": 0, "regimes": [{"alphabet": 16, "logit_scale": 1.5,
"matrix_seed": 7, "length": 50000}, ...]}} for Markov streams.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

from .adapters import FreezeMask, LoraSpec
from .corpus import CorpusStream, SyntheticSpec, load_corpus, load_manifest, random_chain, synthesize_stream
from .engines import EngineConfig
from .model import ModelConfig, PRESETS
from .tokenizers import BpeTokenizer, ByteTokenizer, RawTokenizer


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/out",
    "model": {"preset": "tiny", "context_length": 64},
    "tokenizer": {"kind": "byte"},
    "data": {},
    "pretrain": {
        "steps": 0,
        "batch_size": 8,
        "segment_length": 64,
        "max_lr": 1e-3,
        "warmup_steps": 50,
        "weight_decay": 0.1,
        "eval_every": 200,
        "val_fraction": 0.05,
        "val_segments": 16,
    },
    "finetune": {
        "amount": 0,
        "batch_size": 8,
        "segment_length": 64,
        "max_lrs": [1e-4, 3e-4, 1e-3],
        "epochs": 2,
        "eval_every": 25,
        "val_fraction": 0.05,
        "val_segments": 16,
        "weight_decay": 0.0,
    },
    "engine": {
        "strategy": "txl_stream",
        "window": 0,
        "overlap": 0,
        "increment": 32,
        "update_frequency": 1,
        "reset_policy": "none",
        "online_lr": 1e-3,
        "accumulate_skipped": False,
        "carry_cache": True,
    },
    "adapter": None,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: Optional[str], overrides: Optional[list[str]] = None) -> dict:
    """Merge file config over defaults, then apply dotted key=value overrides."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    cfg = _deep_merge(DEFAULTS, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        _apply_override(cfg, key.strip(), value.strip())
    return cfg


def _apply_override(cfg: dict, dotted: str, raw_value: str) -> None:
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def build_tokenizer(cfg: dict):
    tok = cfg.get("tokenizer", {"kind": "byte"})
    kind = tok.get("kind", "byte")
    if kind == "byte":
        return ByteTokenizer()
    if kind == "raw":
        if "vocab" not in tok:
            raise ConfigError("raw tokenizer needs a 'vocab' size")
        return RawTokenizer(int(tok["vocab"]))
    if kind == "bpe":
        if "load" in tok:
            return BpeTokenizer.load(tok["load"])
        if "train_manifest" not in tok:
            raise ConfigError("bpe tokenizer needs 'train_manifest' or 'load'")
        text = "".join(
            Path(f).read_text(encoding="utf-8") for f in load_manifest(tok["train_manifest"])
        )
        return BpeTokenizer.train(text, int(tok.get("vocab", 512)))
    raise ConfigError(f"unknown tokenizer kind {kind!r}")


def build_stream(cfg: dict, which: str, tokenizer) -> CorpusStream:
    data = cfg.get("data", {})
    if which not in data:
        raise ConfigError(f"config has no data.{which} source")
    source = data[which]
    if "manifest" in source:
        return load_corpus(load_manifest(source["manifest"]), tokenizer)
    if "synthetic" in source:
        return build_synthetic(source["synthetic"])
    raise ConfigError(f"data.{which} needs either 'manifest' or 'synthetic'")


def build_synthetic(spec_cfg: dict) -> CorpusStream:
    regimes = []
    for reg in spec_cfg.get("regimes", []):
        if "alphabet" not in reg:
            raise ConfigError("synthetic regime needs 'alphabet'")
        matrix = random_chain(
            int(reg["alphabet"]),
            float(reg.get("logit_scale", 1.0)),
            int(reg.get("matrix_seed", 0)),
        )
        regimes.append((matrix, int(reg["length"])))
    if not regimes:
        raise ConfigError("synthetic source needs at least one regime")
    return synthesize_stream(SyntheticSpec(regimes=regimes, seed=int(spec_cfg.get("seed", 0))))


def synthetic_spec(spec_cfg: dict) -> SyntheticSpec:
    regimes = [
        (
            random_chain(int(r["alphabet"]), float(r.get("logit_scale", 1.0)), int(r.get("matrix_seed", 0))),
            int(r["length"]),
        )
        for r in spec_cfg.get("regimes", [])
    ]
    return SyntheticSpec(regimes=regimes, seed=int(spec_cfg.get("seed", 0)))


def build_model_config(cfg: dict, tokenizer) -> ModelConfig:
    m = dict(cfg.get("model", {}))
    preset = m.pop("preset", None)
    vocab = m.pop("vocab_size", None)
    if vocab is None:
        vocab = tokenizer.vocab_size + 1  # reserve BOS above the corpus ids
    context = m.pop("context_length", 64)
    seed = m.pop("seed", cfg.get("seed", 0))
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}")
        base = dict(PRESETS[preset])
        base.update(m)
        m = base
    required = {"num_blocks", "d_model", "num_heads", "kv_size", "ffn_mult"}
    missing = required - set(m)
    if missing:
        raise ConfigError(f"model config missing fields: {sorted(missing)}")
    try:
        return ModelConfig(vocab_size=int(vocab), context_length=int(context), seed=int(seed), **m)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad model config: {e}") from e


def build_engine_config(cfg: dict) -> EngineConfig:
    e = dict(cfg.get("engine", {}))
    e.pop("lr_sweep", None)
    try:
        return EngineConfig(**e)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad engine config: {err}") from err


def build_adapter(cfg: dict):
    a = cfg.get("adapter")
    if a is None:
        return None
    kind = a.get("kind")
    if kind == "lora":
        return LoraSpec(rank=int(a["rank"]), alpha=float(a.get("alpha", 0.0)))
    if kind == "freeze":
        return FreezeMask(blocks=tuple(a["blocks"]), include_embeddings=bool(a.get("include_embeddings", False)))
    raise ConfigError(f"unknown adapter kind {kind!r}")
