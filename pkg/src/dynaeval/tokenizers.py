"""Byte-level tokenizer (default) and a greedy byte-pair tokenizer trainable
on the pretraining corpus. Both round-trip arbitrary UTF-8 exactly."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence


class ByteTokenizer:
    """UTF-8 bytes as tokens; vocabulary is exactly 256."""

    vocab_size = 256
    tokenizer_id = "byte-256"

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(int(i) for i in ids).decode("utf-8")


class BpeTokenizer:
    """Greedy byte-pair encoding over UTF-8 bytes.

    Training repeatedly merges the most frequent adjacent pair (ties broken
    by smallest pair for determinism) until the target vocabulary is reached.
    Encoding replays merges in training order.
    """

    def __init__(self, merges: list[tuple[int, int]]):
        self.merges = [tuple(m) for m in merges]
        self.vocab_size = 256 + len(self.merges)
        self._ranks = {pair: 256 + i for i, pair in enumerate(self.merges)}
        self._bytes: list[bytes] = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            self._bytes.append(self._bytes[a] + self._bytes[b])
        digest = hashlib.blake2b(
            json.dumps(self.merges).encode(), digest_size=4
        ).hexdigest()
        self.tokenizer_id = f"bpe-{self.vocab_size}-{digest}"

    @classmethod
    def train(cls, text: str, vocab_size: int) -> "BpeTokenizer":
        if not 256 < vocab_size <= 65536:
            raise ValueError(f"BPE vocab size must be in (256, 65536], got {vocab_size}")
        ids = list(text.encode("utf-8"))
        merges: list[tuple[int, int]] = []
        while len(merges) + 256 < vocab_size and len(ids) >= 2:
            counts = Counter(zip(ids, ids[1:]))
            (pair, freq) = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
            if freq < 2:
                break
            new_id = 256 + len(merges)
            merges.append(pair)
            ids = cls._apply(ids, pair, new_id)
        return cls(merges)

    @staticmethod
    def _apply(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                out.append(new_id)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        return out

    def encode(self, text: str) -> list[int]:
        ids = list(text.encode("utf-8"))
        while len(ids) >= 2:
            pairs = set(zip(ids, ids[1:]))
            ranked = [(self._ranks[p], p) for p in pairs if p in self._ranks]
            if not ranked:
                break
            rank, pair = min(ranked)
            ids = self._apply(ids, pair, rank)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return b"".join(self._bytes[int(i)] for i in ids).decode("utf-8")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"merges": self.merges}), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([tuple(m) for m in data["merges"]])


class RawTokenizer:
    """Identity tokenizer for streams that are already integer tokens."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.tokenizer_id = f"raw-{vocab_size}"

    def encode(self, text: str) -> list[int]:
        return [int(t) for t in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(str(int(i)) for i in ids)
