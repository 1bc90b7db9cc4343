"""Measurement artifacts derived from evaluation records: cumulative-loss
regret against a comparator, nats/token summaries, FLOPs totals, and Pareto
fronts over (FLOPs, mean NLL)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engines import EngineConfig, EvalRecord
from .model import ModelConfig, count_flops_forward


class StreamMismatchError(ValueError):
    pass


@dataclass
class RegretSeries:
    """Cumulative nll of a run minus that of a comparator at each position."""

    positions: list[int]
    regret: list[float]
    boundary_positions: list[int]

    def to_json_obj(self) -> dict:
        return {
            "positions": self.positions,
            "regret": self.regret,
            "boundary_positions": self.boundary_positions,
        }


@dataclass
class ParetoPoint:
    flops_total: float
    mean_nll: float
    label: str = ""

    def to_json_obj(self) -> dict:
        return {"flops_total": self.flops_total, "mean_nll": self.mean_nll, "label": self.label}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ParetoPoint":
        return cls(float(obj["flops_total"]), float(obj["mean_nll"]), str(obj.get("label", "")))


def regret(run: list[EvalRecord], comparator: list[EvalRecord]) -> RegretSeries:
    """Elementwise cumulative-sum difference over identical token coverage."""
    if len(run) != len(comparator):
        raise StreamMismatchError(
            f"run has {len(run)} records but comparator has {len(comparator)}"
        )
    for r, c in zip(run, comparator):
        if r.token_position != c.token_position or r.document_id != c.document_id:
            raise StreamMismatchError(
                f"stream mismatch at position {r.token_position} vs {c.token_position}"
            )
    run_nll = np.array([r.nll for r in run], dtype=np.float64)
    comp_nll = np.array([c.nll for c in comparator], dtype=np.float64)
    series = np.cumsum(run_nll) - np.cumsum(comp_nll)
    positions = [r.token_position for r in run]
    docs = [r.document_id for r in run]
    boundaries = [positions[i] for i in range(len(docs)) if i > 0 and docs[i] != docs[i - 1]]
    return RegretSeries(positions=positions, regret=series.tolist(), boundary_positions=boundaries)


def mean_nll(records: list[EvalRecord]) -> float:
    if not records:
        raise ValueError("mean_nll of an empty record list is undefined")
    return float(np.mean([r.nll for r in records]))


def total_nll(records: list[EvalRecord]) -> float:
    return float(np.sum([r.nll for r in records])) if records else 0.0


def _dominates(q: ParetoPoint, p: ParetoPoint) -> bool:
    """Strict domination: q is no worse on both axes and better on one."""
    return (
        q.flops_total <= p.flops_total
        and q.mean_nll <= p.mean_nll
        and (q.flops_total < p.flops_total or q.mean_nll < p.mean_nll)
    )


def pareto_front(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Points not strictly dominated, sorted by FLOPs ascending.

    Exact duplicates are kept (neither strictly dominates its twin); a point
    tied on one axis but worse on the other is dominated and dropped.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i].flops_total, points[i].mean_nll))
    front: list[ParetoPoint] = []
    best_nll = float("inf")
    best_flops = float("inf")
    for i in order:
        p = points[i]
        if p.mean_nll < best_nll or (p.mean_nll == best_nll and p.flops_total == best_flops):
            front.append(p)
            best_nll = p.mean_nll
            best_flops = p.flops_total
    return front


def flops_total(
    records: list[EvalRecord],
    mode: str,
    model_config: ModelConfig,
    engine_config: EngineConfig,
    trainable_params: int,
) -> float:
    """Recompute a run's FLOPs from its serialized records.

    Walks the records, rebuilding the increment/window structure from the
    engine config (including boundary splits under the reset policy), charges
    forward FLOPs per chunk, 2x forward for chunks that computed gradients
    (signalled by the ``updated`` flags and the update frequency), and
    10 * trainable parameters per applied update. Serves as an independent
    check on the engine's own accounting.
    """
    if mode not in ("forward_only", "with_backward_and_update"):
        raise ValueError(f"unknown flops mode {mode!r}")
    if not records:
        return 0.0

    ctx = model_config.context_length
    chunks = _rebuild_chunks(records, engine_config)
    total = 0.0
    cache_len = 0
    for chunk in chunks:
        size = chunk["size"]
        if engine_config.strategy == "overlapping":
            fwd = count_flops_forward(model_config, size, attended=size)
        else:
            fwd = count_flops_forward(model_config, size, attended=min(ctx, cache_len + size))
            cache_len = 0 if chunk["resets_after"] or not engine_config.carry_cache else min(
                ctx, cache_len + size
            )
        total += fwd
        if mode == "with_backward_and_update":
            if chunk["grad"]:
                total += 2.0 * fwd
            if chunk["updated"]:
                total += 10.0 * trainable_params
    return total


def _rebuild_chunks(records: list[EvalRecord], cfg: EngineConfig) -> list[dict]:
    """Reconstruct per-invocation structure from per-token records."""
    n = len(records)
    docs = [r.document_id for r in records]
    split = cfg.reset_policy == "at_document_boundary"
    spans: list[tuple[int, int]] = []
    start = 0
    for i in range(1, n):
        if split and docs[i] != docs[i - 1]:
            spans.append((start, i))
            start = i
    spans.append((start, n))

    chunks = []
    index = 0
    for span_start, span_end in spans:
        if cfg.strategy == "overlapping":
            stride = cfg.window - cfg.overlap
            s = span_start
            recorded = span_start
            while recorded < span_end:
                e = min(s + cfg.window, span_end)
                chunks.append(
                    {
                        "size": e - s,
                        "new": (recorded, e),
                        "index": index,
                        "resets_after": False,
                    }
                )
                recorded = e
                s += stride
                index += 1
        else:
            pos = span_start
            while pos < span_end:
                e = min(pos + cfg.increment, span_end)
                chunks.append(
                    {
                        "size": e - pos,
                        "new": (pos, e),
                        "index": index,
                        "resets_after": e == span_end and span_end != n,
                    }
                )
                pos = e
                index += 1

    for chunk in chunks:
        first_new = chunk["new"][0]
        chunk["updated"] = records[first_new].updated
        due = (chunk["index"] % cfg.update_frequency) == cfg.update_frequency - 1
        chunk["grad"] = due or cfg.accumulate_skipped
    return chunks


def save_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
