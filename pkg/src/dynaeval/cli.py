"""Command-line harness: pretrain, finetune, eval, sweep, stats, and LoRA
export, orchestrating the experiment pipeline from JSON configs.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime failure.
``DYNAEVAL_WORKERS`` controls sweep parallelism (default 1, sequential).
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, build_model_config, build_stream, build_tokenizer, load_config
from .corpus import corpus_stats
from .metrics import pareto_front, save_json
from .pipeline import ensure_checkpoints, run_eval, run_finetune, run_point, run_pretrain

logger = logging.getLogger("dynaeval")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="path to a JSON run config")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", help="override the output directory")
    sub.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. engine.increment=64 (repeatable)",
    )


def _resolve(args) -> dict:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_pretrain(cfg, out_dir / "pretrain.ckpt", resume=args.resume)
    report["config"] = cfg
    save_json(report, out_dir / "pretrain_report.json")
    print(json.dumps({k: report[k] for k in ("checkpoint", "steps_done", "diverged")}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_finetune(cfg, args.checkpoint, out_dir / "finetune.ckpt")
    report["config"] = cfg
    save_json(report, out_dir / "finetune_report.json")
    print(json.dumps({k: report.get(k) for k in ("checkpoint", "chosen_lr")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    summary = run_eval(cfg, args.checkpoint, cfg["out_dir"])
    print(
        json.dumps(
            {k: summary[k] for k in ("mean_nll", "total_nll", "total_flops", "num_tokens")}
        )
    )
    return EXIT_OK


def _expand_grid(base: dict, axes: dict) -> list[tuple[str, dict]]:
    """Cartesian product over dotted-key axes, with readable labels."""
    if not axes:
        return [("run", copy.deepcopy(base))]
    keys = sorted(axes)
    points = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        cfg = copy.deepcopy(base)
        label_parts = []
        for key, value in zip(keys, combo):
            node = cfg
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
            label_parts.append(f"{parts[-1]}={value}")
        points.append(("_".join(label_parts).replace("/", "-"), cfg))
    return points


def _sweep_worker(payload: tuple[str, dict, str, str]) -> dict:
    label, cfg, out_dir, cache_dir = payload
    try:
        point = run_point(cfg, label, out_dir, cache_dir)
        return {"ok": True, "point": point.to_json_obj()}
    except Exception as e:  # individual run failures must not kill the sweep
        logger.exception("sweep point %s failed", label)
        return {"ok": False, "label": label, "error": f"{type(e).__name__}: {e}"}


def cmd_sweep(args) -> int:
    cfg_path = Path(args.config) if args.config else None
    if cfg_path is None or not cfg_path.is_file():
        raise ConfigError("sweep needs --config pointing at a grid spec JSON")
    spec = json.loads(cfg_path.read_text(encoding="utf-8"))
    if "base" not in spec:
        raise ConfigError("sweep spec needs a 'base' run config")
    base = load_config(None, args.override)
    base = _merge_base(base, spec["base"])
    if args.seed is not None:
        base["seed"] = args.seed
    if args.out is not None:
        base["out_dir"] = args.out
    axes = spec.get("axes", {})
    points = _expand_grid(base, axes)
    out_dir = Path(base["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = out_dir / "cache"

    # Training artifacts are shared across grid points; build them serially
    # so parallel workers only race on evaluation.
    for label, cfg in points:
        ensure_checkpoints(cfg, cache_dir)

    workers = int(os.environ.get("DYNAEVAL_WORKERS", "1"))
    payloads = [(label, cfg, str(out_dir), str(cache_dir)) for label, cfg in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]

    cloud = [r["point"] for r in results if r["ok"]]
    failures = [r for r in results if not r["ok"]]
    from .metrics import ParetoPoint

    front = pareto_front([ParetoPoint.from_json_obj(p) for p in cloud])
    save_json(cloud, out_dir / "cloud.json")
    save_json([p.to_json_obj() for p in front], out_dir / "front.json")
    save_json(
        {"base": base, "axes": axes, "failures": failures, "num_points": len(cloud)},
        out_dir / "sweep_report.json",
    )
    print(json.dumps({"points": len(cloud), "front": len(front), "failures": len(failures)}))
    return EXIT_OK


def _merge_base(defaults: dict, base: dict) -> dict:
    from .config import _deep_merge

    return _deep_merge(defaults, base)


def cmd_stats(args) -> int:
    cfg = _resolve(args)
    tokenizer = build_tokenizer(cfg)
    stream = build_stream(cfg, args.which, tokenizer)
    reference = None
    if args.reference:
        reference = build_stream(cfg, args.reference, tokenizer)
    model_cfg = cfg.get("model", {})
    stats = corpus_stats(
        stream,
        context_length=model_cfg.get("context_length"),
        reference=reference,
    )
    stats["which"] = args.which
    stats["config"] = cfg
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_json(stats, out_dir / "stats.json")
    print(json.dumps({"num_docs": stats["num_docs"], "num_tokens": stats["num_tokens"]}))
    return EXIT_OK


def cmd_export_lora_merged(args) -> int:
    from .adapters import merge_lora

    base, step = load_checkpoint(args.base)
    merged_params, _ = load_checkpoint(args.adapter, base=base)
    merged = merge_lora(merged_params)
    save_checkpoint(args.out_path, merged, step=step)
    print(json.dumps({"merged": args.out_path}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynaeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a model from scratch")
    _common_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="run an evaluation engine over a stream")
    _common_flags(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: fresh init)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of evaluations and emit a Pareto front")
    _common_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("stats", help="corpus statistics")
    _common_flags(p)
    p.add_argument("--which", default="eval", choices=["pretrain", "finetune", "eval"])
    p.add_argument("--reference", choices=["pretrain", "finetune", "eval"])
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("export-lora-merged", help="fold a LoRA checkpoint into its base")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out-path", required=True)
    p.set_defaults(fn=cmd_export_lora_merged)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DYNAEVAL_LOGLEVEL", "INFO"), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception("run failed")
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
