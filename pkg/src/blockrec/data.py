"""Byte tokenization and long-document streaming into fixed-length segments."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from blockrec.attention import ConfigError

VOCAB_SIZE = 256
PAD_ID = 256
DEFAULT_SEPARATOR = b"\n\x1e\n"  # newline, ASCII record separator, newline


def byte_tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def byte_detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    return bytes(ids[ids < VOCAB_SIZE].astype(np.uint8).tolist())


@dataclass
class DocumentStore:
    docs: list[bytes]
    ids: list[str] = field(default_factory=list)
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        if not self.ids:
            self.ids = [f"doc{i:06d}" for i in range(len(self.docs))]
        keep = [i for i, d in enumerate(self.docs) if len(d) > 0]
        self.docs = [self.docs[i] for i in keep]
        self.ids = [self.ids[i] for i in keep]

    def __len__(self):
        return len(self.docs)

    def total_bytes(self) -> int:
        return sum(len(d) for d in self.docs)

    @classmethod
    def from_directory(cls, path: str | Path, split: str = "train", pattern: str = "*") -> "DocumentStore":
        """One document per regular file, in sorted filename order."""
        files = sorted(p for p in Path(path).glob(pattern) if p.is_file())
        return cls([p.read_bytes() for p in files], [p.name for p in files], split)

    @classmethod
    def from_file(cls, path: str | Path, separator: bytes = DEFAULT_SEPARATOR, split: str = "train") -> "DocumentStore":
        """A single file whose documents are joined by ``separator``."""
        raw = Path(path).read_bytes()
        return cls(raw.split(separator), [], split)

    @classmethod
    def load(cls, path: str | Path, separator: bytes = DEFAULT_SEPARATOR, split: str = "train") -> "DocumentStore":
        p = Path(path)
        return cls.from_directory(p, split) if p.is_dir() else cls.from_file(p, separator, split)

    def save_concatenated(self, path: str | Path, separator: bytes = DEFAULT_SEPARATOR) -> None:
        Path(path).write_bytes(separator.join(self.docs))


@dataclass
class Segment:
    """One training step's slab: [batch, N] inputs with shifted targets.

    mask marks positions that carry a real prediction target; reset marks
    streams whose segment is the first of a new document.
    """

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    reset: np.ndarray
    doc_index: np.ndarray
    offset: np.ndarray
    index: int = 0


def _stream_plan(store: DocumentStore, batch: int, seed: int, shuffle: bool) -> list[list[int]]:
    n = len(store)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n).tolist()
    else:
        lengths = [len(d) for d in store.docs]
        order = sorted(range(n), key=lambda i: (-lengths[i], i))
    return [order[s::batch] for s in range(batch)]


def segment_stream(store: DocumentStore, segment: int, batch: int = 1, seed: int = 0,
                   shuffle: bool = False) -> Iterator[Segment]:
    """Deterministic pass over ``store``: each stream walks its documents N tokens at a time.

    Documents are dealt round-robin to streams (length-descending, or a
    seeded permutation when ``shuffle``). The target of position k is token
    k + 1 of the same document, so the last token of a segment predicts the
    first token of the next. Streams that run out of documents emit
    all-padding segments until the longest stream finishes.
    """
    if len(store) == 0:
        raise ConfigError("document store is empty")
    if segment < 1 or batch < 1:
        raise ConfigError("segment length and batch must be >= 1")
    docs = [byte_tokenize(d) for d in store.docs]
    plans = []
    for stream_docs in _stream_plan(store, batch, seed, shuffle):
        plans.append([(k, s) for k in stream_docs for s in range(0, len(docs[k]), segment)])
    steps = max(len(p) for p in plans)
    for t in range(steps):
        tokens = np.full((batch, segment), PAD_ID, dtype=np.int64)
        targets = np.full((batch, segment), PAD_ID, dtype=np.int64)
        mask = np.zeros((batch, segment), dtype=bool)
        reset = np.ones(batch, dtype=bool)
        doc_index = np.full(batch, -1, dtype=np.int64)
        offset = np.zeros(batch, dtype=np.int64)
        for b, plan in enumerate(plans):
            if t >= len(plan):
                continue
            k, s = plan[t]
            d = docs[k]
            chunk = d[s:s + segment]
            tokens[b, :len(chunk)] = chunk
            tgt = d[s + 1:s + segment + 1]
            targets[b, :len(tgt)] = tgt
            mask[b, :len(tgt)] = True
            reset[b] = s == 0
            doc_index[b], offset[b] = k, s
        yield Segment(tokens, targets, mask, reset, doc_index, offset, t)


def training_stream(store: DocumentStore, segment: int, batch: int, seed: int = 0) -> Iterator[Segment]:
    """Endless sequence of shuffled epochs; segment indices keep counting."""
    index = itertools.count()
    for epoch in itertools.count():
        for seg in segment_stream(store, segment, batch, seed + epoch, shuffle=True):
            seg.index = next(index)
            yield seg
