"""Embedding matrices, relevance judgments and minibatch sampling.

Embedding files use a small binary layout::

    b"EHIV1\\0" | u64 count | u64 dim | count*dim f32   (all little-endian)

with a sidecar ``<path>.ids`` holding one UTF-8 id per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EHIV1\x00"
_HEADER = struct.Struct("<QQ")


class DataError(ValueError):
    """Raised for malformed embedding or qrels input."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    ids: list[str]
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DataError(f"expected a 2-D array, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DataError("embedding dim must be positive")
        if data.shape[0] != len(self.ids):
            raise DataError(
                f"{data.shape[0]} rows but {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate ids")
        bad = ~np.isfinite(data)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise DataError(f"non-finite value at row {row}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", list(self.ids))

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def index_of(self) -> dict[str, int]:
        return {d: i for i, d in enumerate(self.ids)}


def _ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def save_embeddings(path, matrix: EmbeddingMatrix) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(matrix.count, matrix.dim))
        fh.write(matrix.data.astype("<f4").tobytes())
    text = "".join(i + "\n" for i in matrix.ids)
    _ids_path(path).write_text(text, encoding="utf-8")


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + _HEADER.size or not raw.startswith(MAGIC):
        raise DataError(f"{path}: malformed header")
    count, dim = _HEADER.unpack_from(raw, len(MAGIC))
    if dim < 1:
        raise DataError(f"{path}: malformed header (dim=0)")
    payload = raw[len(MAGIC) + _HEADER.size:]
    if len(payload) != count * dim * 4:
        raise DataError(
            f"{path}: payload size mismatch "
            f"(expected {count * dim} floats, found {len(payload) / 4:g})")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)

    ids_file = _ids_path(path)
    if not ids_file.exists():
        raise DataError(f"{ids_file}: missing id sidecar")
    ids = ids_file.read_text(encoding="utf-8").split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != count:
        raise DataError(
            f"{ids_file}: count mismatch ({len(ids)} ids for {count} rows)")
    return EmbeddingMatrix(ids, data)


@dataclass(frozen=True)
class RelevanceJudgments:
    """Binary (query, doc, label) triples.

    Pairs never listed are treated as irrelevant.
    """

    labels: dict[tuple[str, str], int]
    positives: dict[str, tuple[str, ...]] = field(init=False)

    def __post_init__(self):
        pos: dict[str, list[str]] = {}
        queries: list[str] = []
        for (q, d), y in self.labels.items():
            if y not in (-1, 1):
                raise DataError(f"label {y!r} for ({q},{d}) not in {{-1, 1}}")
            if q not in pos:
                pos[q] = []
                queries.append(q)
            if y == 1:
                pos[q].append(d)
        for q in queries:
            if not pos[q]:
                raise DataError(f"query {q} has no positive")
        object.__setattr__(
            self, "positives", {q: tuple(pos[q]) for q in queries})

    @property
    def queries(self) -> list[str]:
        return list(self.positives)

    @property
    def triples(self) -> set[tuple[str, str, int]]:
        return {(q, d, y) for (q, d), y in self.labels.items()}

    def negatives(self, query: str) -> list[str]:
        return [d for (q, d), y in self.labels.items() if q == query and y == -1]


def parse_qrels(lines) -> RelevanceJudgments:
    labels: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"line {lineno}: expected 3 tab-separated fields")
        q, d, raw = parts
        try:
            y = int(raw)
        except ValueError:
            raise DataError(f"line {lineno}: label {raw!r} not in {{-1, 1}}")
        if y not in (-1, 1):
            raise DataError(f"line {lineno}: label {y} not in {{-1, 1}}")
        prev = labels.get((q, d))
        if prev is not None and prev != y:
            raise DataError(f"conflicting label for ({q},{d})")
        labels[(q, d)] = y
    return RelevanceJudgments(labels)


def load_qrels(path) -> RelevanceJudgments:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            return parse_qrels(fh)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None


def save_qrels(path, judgments: RelevanceJudgments) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (q, d), y in judgments.labels.items():
            fh.write(f"{q}\t{d}\t{y}\n")


@dataclass(frozen=True)
class Batch:
    entries: list[tuple[str, str]]

    def __post_init__(self):
        qs = [q for q, _ in self.entries]
        if len(set(qs)) != len(qs):
            raise DataError("batch queries must be distinct")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def queries(self) -> list[str]:
        return [q for q, _ in self.entries]

    @property
    def docs(self) -> list[str]:
        return [d for _, d in self.entries]


def sample_minibatch(judgments: RelevanceJudgments, size: int,
                     rng: np.random.Generator, queries=None) -> Batch:
    """Draw ``size`` distinct queries and one uniform positive for each.

    ``queries`` restricts the pool (defaults to every judged query).
    """
    pool = judgments.queries if queries is None else list(queries)
    if size < 1:
        raise DataError("batch size must be positive")
    if size > len(pool):
        raise DataError(
            f"batch size {size} exceeds query count {len(pool)}")
    picks = rng.choice(len(pool), size=size, replace=False)
    entries = []
    for i in picks:
        q = pool[int(i)]
        pos = judgments.positives[q]
        entries.append((q, pos[int(rng.integers(len(pos)))]))
    return Batch(entries)


def epoch_batches(judgments: RelevanceJudgments, size: int,
                  rng: np.random.Generator, queries=None) -> list[Batch]:
    """Partition a shuffled query pool into batches of ``size`` (last may be short)."""
    pool = judgments.queries if queries is None else list(queries)
    order = rng.permutation(len(pool))
    batches = []
    for start in range(0, len(order), size):
        entries = []
        for i in order[start:start + size]:
            q = pool[int(i)]
            pos = judgments.positives[q]
            entries.append((q, pos[int(rng.integers(len(pos)))]))
        batches.append(Batch(entries))
    return batches
