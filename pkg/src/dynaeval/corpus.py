"""Token streams: ordered document collections concatenated with boundary
markers, synthetic Markov-chain corpora with a computable entropy rate, i.i.d.
segment sampling for pretrain/finetune, and corpus statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass
class CorpusStream:
    """Concatenated token stream with document structure.

    ``doc_boundaries`` holds the start position of each document (first is
    always 0); ``doc_ids`` maps every token to its document index.
    """

    tokens: np.ndarray
    doc_boundaries: list[int]
    doc_ids: np.ndarray
    tokenizer_id: str = "raw-int"

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64)
        if self.tokens.shape != self.doc_ids.shape:
            raise CorpusError("tokens and doc_ids must align")
        if self.tokens.size:
            if not self.doc_boundaries or self.doc_boundaries[0] != 0:
                raise CorpusError("first document boundary must be 0")
            if any(b >= a for a, b in zip(self.doc_boundaries[1:], self.doc_boundaries)):
                raise CorpusError("document boundaries must be strictly increasing")

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def num_docs(self) -> int:
        return len(self.doc_boundaries)

    def doc_lengths(self) -> list[int]:
        edges = list(self.doc_boundaries) + [len(self)]
        return [b - a for a, b in zip(edges, edges[1:])]

    def slice(self, start: int, end: int) -> "CorpusStream":
        """Sub-stream view with boundaries re-based (used for prefix replay)."""
        toks = self.tokens[start:end]
        ids = self.doc_ids[start:end]
        bounds = [0] + [b - start for b in self.doc_boundaries if start < b < end] if toks.size else []
        return CorpusStream(toks, bounds, ids, tokenizer_id=self.tokenizer_id)


def concatenate_documents(docs: Sequence[np.ndarray], tokenizer_id: str) -> CorpusStream:
    kept = [np.asarray(d, dtype=np.int64) for d in docs if len(d)]
    if not kept:
        return CorpusStream(np.zeros(0, dtype=np.int64), [], np.zeros(0, dtype=np.int64), tokenizer_id)
    boundaries = []
    doc_ids = []
    pos = 0
    for i, d in enumerate(kept):
        boundaries.append(pos)
        doc_ids.append(np.full(len(d), i, dtype=np.int64))
        pos += len(d)
    return CorpusStream(np.concatenate(kept), boundaries, np.concatenate(doc_ids), tokenizer_id)


def load_manifest(path) -> list[Path]:
    """Manifest file: newline-separated paths, relative to the manifest."""
    manifest = Path(path)
    if not manifest.is_file():
        raise CorpusError(f"manifest not found: {manifest}")
    root = manifest.parent
    files = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            files.append(p if p.is_absolute() else root / p)
    return files


def load_corpus(files: Sequence, tokenizer) -> CorpusStream:
    """Tokenize and concatenate documents in manifest order.

    Missing files raise naming the file; empty documents are skipped with a
    warning. Deterministic for a fixed manifest and tokenizer.
    """
    docs = []
    for f in files:
        p = Path(f)
        if not p.is_file():
            raise CorpusError(f"corpus file missing: {p}")
        text = p.read_text(encoding="utf-8")
        ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
        if ids.size == 0:
            logger.warning("skipping empty document: %s", p)
            continue
        docs.append(ids)
    return concatenate_documents(docs, tokenizer_id=tokenizer.tokenizer_id)


# ---------------------------------------------------------------------------
# Synthetic nonstationary corpora


@dataclass
class SyntheticSpec:
    """Markov regimes acting as documents: each entry is (transition matrix
    over a small alphabet, length in tokens). Rows must sum to one."""

    regimes: list[tuple[np.ndarray, int]]
    seed: int = 0

    def __post_init__(self):
        cleaned = []
        for matrix, length in self.regimes:
            m = np.asarray(matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise CorpusError(f"transition matrix must be square, got {m.shape}")
            if not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
                raise CorpusError("transition matrix rows must sum to 1")
            cleaned.append((m, int(length)))
        self.regimes = cleaned

    @property
    def alphabet_size(self) -> int:
        return self.regimes[0][0].shape[0]


def random_chain(alphabet: int, logit_scale: float, seed: int) -> np.ndarray:
    """Dense random transition matrix: softmax of Gaussian logits per row.

    ``logit_scale`` tunes entropy (0 gives uniform, larger gives peakier
    rows); the resulting log-matrix is full rank with probability one, which
    makes model capacity matter.
    """
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 1.0, size=(alphabet, alphabet)) * logit_scale
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    vals, vecs = np.linalg.eig(m.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def entropy_rate(matrix: np.ndarray) -> float:
    """Shannon entropy rate of the stationary chain, in nats per token."""
    m = np.asarray(matrix, dtype=np.float64)
    pi = stationary_distribution(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(m > 0, np.log(m), 0.0)
    return float(-(pi[:, None] * m * logs).sum())


def stream_entropy_floor(spec: SyntheticSpec) -> float:
    """Length-weighted entropy rate over regimes: a lower bound on what any
    predictor can average on streams drawn from the spec."""
    total = sum(length for _, length in spec.regimes)
    return sum(entropy_rate(m) * length for m, length in spec.regimes) / total


def synthesize_stream(spec: SyntheticSpec) -> CorpusStream:
    """Sample each regime's chain (initial state from its stationary
    distribution) and concatenate, with boundaries at regime switches."""
    rng = np.random.default_rng(spec.seed)
    docs = []
    for matrix, length in spec.regimes:
        pi = stationary_distribution(matrix)
        states = np.empty(length, dtype=np.int64)
        cum = matrix.cumsum(axis=1)
        state = int(rng.choice(len(pi), p=pi))
        draws = rng.random(length)
        for i in range(length):
            states[i] = state
            state = int(np.searchsorted(cum[state], draws[i], side="right"))
            state = min(state, matrix.shape[0] - 1)
        docs.append(states)
    return concatenate_documents(docs, tokenizer_id=f"markov-{spec.alphabet_size}")


# ---------------------------------------------------------------------------
# Segment sampling for pretraining / finetuning


def sample_finetune_batches(
    stream: CorpusStream,
    segment_length: int,
    batch_size: int,
    seed: int,
    num_batches: Optional[int] = None,
    starts: Optional[np.ndarray] = None,
) -> Iterator[np.ndarray]:
    """Yield [batch x segment] arrays of i.i.d. uniformly-placed segments.

    When ``starts`` is given (a fixed finetuning dataset), batches cycle
    through it in a seeded shuffled order instead of sampling fresh.
    """
    n = len(stream)
    if n <= segment_length:
        raise CorpusError(f"corpus length {n} too short for segments of {segment_length}")
    rng = np.random.default_rng(seed)
    produced = 0
    if starts is not None:
        order = np.array(starts, dtype=np.int64)
        while num_batches is None or produced < num_batches:
            perm = rng.permutation(len(order))
            for i in range(0, len(order) - batch_size + 1, batch_size):
                chosen = order[perm[i : i + batch_size]]
                yield np.stack([stream.tokens[s : s + segment_length] for s in chosen])
                produced += 1
                if num_batches is not None and produced >= num_batches:
                    return
    else:
        while num_batches is None or produced < num_batches:
            chosen = rng.integers(0, n - segment_length, size=batch_size)
            yield np.stack([stream.tokens[s : s + segment_length] for s in chosen])
            produced += 1


def sample_segment_starts(stream: CorpusStream, segment_length: int, count: int, seed: int) -> np.ndarray:
    """Fixed dataset of segment start positions (the finetune-amount knob)."""
    n = len(stream)
    if n <= segment_length:
        raise CorpusError(f"corpus length {n} too short for segments of {segment_length}")
    rng = np.random.default_rng(seed)
    return rng.integers(0, n - segment_length, size=count)


# ---------------------------------------------------------------------------
# Statistics


def corpus_stats(
    stream: CorpusStream,
    context_length: Optional[int] = None,
    reference: Optional[CorpusStream] = None,
) -> dict:
    """Document-length histogram (log-spaced bins, cube-root count rule) and a
    token frequency table sorted by decreasing frequency in the reference
    corpus (itself by default) so two corpora share one x-axis."""
    lengths = np.array(stream.doc_lengths(), dtype=np.int64)
    out: dict = {"num_docs": int(lengths.size), "num_tokens": len(stream)}
    if lengths.size:
        lo, hi = float(lengths.min()), float(lengths.max())
        nbins = max(2, math.ceil(lengths.size ** (1.0 / 3.0)))
        if lo == hi:
            edges = np.array([lo, hi + 1.0])
        else:
            edges = np.geomspace(lo, hi, nbins + 1)
            edges[-1] = hi  # guard the max against geomspace rounding
        counts, _ = np.histogram(lengths, bins=edges)
        out["length_hist"] = {"bin_edges": edges.tolist(), "counts": counts.tolist()}
    else:
        out["length_hist"] = {"bin_edges": [], "counts": []}

    ref = reference if reference is not None else stream
    vocab = int(max(stream.tokens.max(initial=0), ref.tokens.max(initial=0))) + 1 if len(stream) or len(ref) else 0
    own = np.bincount(stream.tokens, minlength=vocab) if len(stream) else np.zeros(0, dtype=np.int64)
    refc = np.bincount(ref.tokens, minlength=vocab) if len(ref) else np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(vocab), -refc)) if vocab else np.zeros(0, dtype=np.int64)
    out["token_freq"] = {
        "ids": order.tolist(),
        "counts": own[order].tolist() if vocab else [],
        "reference_counts": refc[order].tolist() if vocab else [],
    }

    if context_length is not None:
        out["context_length"] = int(context_length)
        exceeding = int((lengths > context_length).sum()) if lengths.size else 0
        out["frac_docs_exceeding_context"] = exceeding / lengths.size if lengths.size else 0.0
    return out
