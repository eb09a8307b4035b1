"""Single-file binary index artifacts (little-endian, fixed-width fields).

Layout::

    b"EHIX" u32 version u8 kind
    str config               (key = value lines)
    u64 n_docs  n_docs * str doc ids
    array doc_base           (f32)
    u8 normalize  array W_enc  array b_enc
    ehi: u32 B  u32 H  H * (array W_h, array U_h)
    ivf: array centroids
    leaf map: u32 d2l  u64 total_docs  u64 n_leaves  u64 n_nonempty
              n_nonempty * (u64 leaf  u64 len  len * u64 doc)

``str`` is u32 byte length + UTF-8; ``array`` is u8 dtype code, u32 ndim,
ndim * u64, then the raw little-endian payload.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, encode
from .indexer import IndexerParams
from .ivf import IvfIndex, IvfSearcher
from .retriever import LeafMap, TreeIndex
from .trainer import TrainConfig

MAGIC = b"EHIX"
FORMAT_VERSION = 1
KINDS = ("ehi", "ivf")
_DTYPES = {0: "<f8", 1: "<f4"}


class ArtifactError(ValueError):
    pass


@dataclass
class Artifact:
    kind: str
    config: TrainConfig
    doc_ids: list
    doc_base: np.ndarray
    theta: EncoderParams
    leaf_map: LeafMap
    phi: IndexerParams = None
    centroids: np.ndarray = None

    def searcher(self):
        doc_embs = encode(self.doc_base, self.theta)
        if self.kind == "ehi":
            return TreeIndex(self.theta, self.phi, self.leaf_map, doc_embs, self.config.metric)
        index = IvfIndex(self.centroids, self.leaf_map)
        return IvfSearcher(self.theta, index, doc_embs, self.config.metric)


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self.buf.write(raw)

    def array(self, a, dtype="<f8"):
        a = np.ascontiguousarray(a, dtype=dtype)
        code = {v: k for k, v in _DTYPES.items()}[dtype]
        self.pack("BI", code, a.ndim)
        for d in a.shape:
            self.pack("Q", d)
        self.buf.write(a.tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise ArtifactError("truncated artifact")
        out = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return out

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise ArtifactError("truncated artifact")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def string(self) -> str:
        (n,) = self.unpack("I")
        return self.bytes(n).decode("utf-8")

    def array(self) -> np.ndarray:
        code, ndim = self.unpack("BI")
        if code not in _DTYPES:
            raise ArtifactError(f"unknown array dtype code {code}")
        shape = self.unpack("Q" * ndim) if ndim else ()
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.bytes(n * dtype.itemsize), dtype=dtype)
        return data.reshape(shape).astype(dtype.newbyteorder("="))


def dumps(art: Artifact) -> bytes:
    if art.kind not in KINDS:
        raise ArtifactError(f"unknown artifact kind {art.kind!r}")
    w = _Writer()
    w.buf.write(MAGIC)
    w.pack("IB", FORMAT_VERSION, KINDS.index(art.kind))
    w.string(art.config.to_text())
    w.pack("Q", len(art.doc_ids))
    for d in art.doc_ids:
        w.string(d)
    w.array(art.doc_base, "<f4")
    w.pack("B", int(art.theta.normalize))
    w.array(art.theta.W)
    w.array(art.theta.b)
    if art.kind == "ehi":
        w.pack("II", art.phi.B, art.phi.H)
        for Wh, Uh in zip(art.phi.W, art.phi.U):
            w.array(Wh)
            w.array(Uh)
    else:
        w.array(art.centroids)
    lm = art.leaf_map
    w.pack("IQQQ", lm.d2l, lm.total_docs, lm.n_leaves, len(lm.assignments))
    for leaf, docs in sorted(lm.assignments.items()):
        w.pack("QQ", leaf, len(docs))
        w.buf.write(np.asarray(docs, dtype="<u8").tobytes())
    return w.buf.getvalue()


def loads(raw: bytes) -> Artifact:
    if not raw.startswith(MAGIC):
        raise ArtifactError("not an index artifact (bad magic)")
    r = _Reader(raw)
    r.pos = len(MAGIC)
    version, kind_code = r.unpack("IB")
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if kind_code >= len(KINDS):
        raise ArtifactError(f"unknown artifact kind code {kind_code}")
    kind = KINDS[kind_code]
    config = TrainConfig.from_text(r.string())
    (n_docs,) = r.unpack("Q")
    doc_ids = [r.string() for _ in range(n_docs)]
    doc_base = r.array()
    (normalize,) = r.unpack("B")
    theta = EncoderParams(r.array(), r.array(), bool(normalize))
    phi = centroids = None
    if kind == "ehi":
        B, H = r.unpack("II")
        W, U = [], []
        for _ in range(H):
            W.append(r.array())
            U.append(r.array())
        phi = IndexerParams(B, H, W, U)
    else:
        centroids = r.array()
    d2l, total, n_leaves, n_nonempty = r.unpack("IQQQ")
    assignments = {}
    for _ in range(n_nonempty):
        leaf, n = r.unpack("QQ")
        docs = np.frombuffer(r.bytes(8 * n), dtype="<u8")
        assignments[int(leaf)] = tuple(int(d) for d in docs)
    if r.pos != len(raw):
        raise ArtifactError("trailing bytes after artifact payload")
    leaf_map = LeafMap(assignments, d2l, total, n_leaves)
    return Artifact(kind, config, doc_ids, doc_base, theta, leaf_map, phi, centroids)


def save_artifact(path, art: Artifact) -> None:
    Path(path).write_bytes(dumps(art))


def load_artifact(path) -> Artifact:
    return loads(Path(path).read_bytes())
