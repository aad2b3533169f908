"""Embedding records, training triplets and their on-disk formats.

The CCEM store is a flat little-endian binary file::

    b"CCEM" | u32 version=1 | u32 count |
    count x ( u16 id_len | id utf-8 | u32 rows | u32 cols | rows*cols f32 )

Row 0 of every record is the global ([CLS]) vector; the remaining rows are
image regions or text tokens.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    MalformedLine,
    SpanOutOfRange,
    TrailingBytes,
    Truncated,
    UnknownId,
    UnsupportedVersion,
)

MAGIC = b"CCEM"
VERSION = 1


@dataclass(frozen=True, eq=False)
class _Embedding:
    id: str
    cls: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.cls, dtype=np.float64)
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if cls.ndim != 1 or rows.ndim != 2 or rows.shape[0] < 1:
            raise DimMismatch(f"{self.id}: need a cls vector and >= 1 row")
        if rows.shape[1] != cls.shape[0]:
            raise DimMismatch(f"{self.id}: cls dim {cls.shape[0]} != row dim {rows.shape[1]}")
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "rows", rows)

    @property
    def h(self) -> int:
        return self.cls.shape[0]

    def as_matrix(self) -> np.ndarray:
        return np.vstack([self.cls[None, :], self.rows])

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.id == other.id
            and self.cls.shape == other.cls.shape
            and self.rows.shape == other.rows.shape
            and np.array_equal(self.cls, other.cls)
            and np.array_equal(self.rows, other.rows)
        )

    def __hash__(self):
        return hash((type(self).__name__, self.id))


class ImageEmbedding(_Embedding):
    """Global vector plus ``r`` region vectors."""

    def __init__(self, id, cls, regions):
        super().__init__(id, cls, regions)

    @property
    def regions(self) -> np.ndarray:
        return self.rows

    @property
    def r(self) -> int:
        return self.rows.shape[0]


class TextEmbedding(_Embedding):
    """Global vector plus ``s`` token vectors."""

    def __init__(self, id, cls, tokens):
        super().__init__(id, cls, tokens)

    @property
    def tokens(self) -> np.ndarray:
        return self.rows

    @property
    def s(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class RawRecord:
    """An untyped CCEM record (e.g. a store of bare concept vectors)."""

    id: str
    matrix: np.ndarray

    def as_matrix(self):
        return np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))


@dataclass(frozen=True)
class ConceptSpan:
    """A concept mention: CUI plus the 1-based token indices it covers."""

    cui: str
    token_indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.token_indices)
        object.__setattr__(self, "token_indices", idx)
        if not idx:
            raise SpanOutOfRange(f"{self.cui}: empty span")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SpanOutOfRange(f"{self.cui}: token indices must be strictly increasing")

    def validate(self, s: int):
        if self.token_indices[0] < 1 or self.token_indices[-1] > s:
            raise SpanOutOfRange(
                f"{self.cui}: indices {list(self.token_indices)} outside 1..{s}"
            )


@dataclass(frozen=True)
class Triplet:
    image: ImageEmbedding
    text: TextEmbedding
    concepts: tuple = ()
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "concepts", tuple(self.concepts))
        for span in self.concepts:
            span.validate(self.text.s)
        if self.image.h != self.text.h:
            raise DimMismatch("image and text embeddings differ in dimension")


@dataclass
class TripletBatch:
    """Positional pairing: image m and text n are positives iff m == n."""

    triplets: List[Triplet]

    def __post_init__(self):
        self.triplets = list(self.triplets)
        if not self.triplets:
            raise ValueError("a batch needs at least one triplet")

    def __len__(self):
        return len(self.triplets)

    def pairing(self) -> np.ndarray:
        n = len(self.triplets)
        return 2.0 * np.eye(n) - 1.0


@dataclass
class AlignmentParams:
    t_g: float = 10.0
    b_g: float = 0.0
    t_l: float = 10.0
    b_l: float = 0.0
    alpha: float = 0.5
    beta: float = 0.5
    k: int = 16

    def __post_init__(self):
        if self.t_g <= 0 or self.t_l <= 0:
            raise ValueError("logit scales t_g and t_l must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if int(self.k) < 1:
            raise ValueError("k must be a positive integer")
        self.k = int(self.k)

    def replace(self, **kw) -> "AlignmentParams":
        d = dict(self.__dict__)
        d.update(kw)
        return AlignmentParams(**d)


# ---------------------------------------------------------------- CCEM store

def write_ccem(store: Sequence, path) -> None:
    """Write image/text embeddings (or RawRecords) to ``path``."""
    mats = []
    h = None
    for rec in store:
        m = rec.as_matrix()
        if h is None:
            h = m.shape[1]
        elif m.shape[1] != h:
            raise DimMismatch(f"record {rec.id!r} has dim {m.shape[1]}, store has {h}")
        mats.append((rec.id, m))

    parts = [MAGIC, struct.pack("<II", VERSION, len(mats))]
    for rid, m in mats:
        raw_id = rid.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise ValueError(f"id too long: {rid[:40]}...")
        parts.append(struct.pack("<H", len(raw_id)))
        parts.append(raw_id)
        parts.append(struct.pack("<II", m.shape[0], m.shape[1]))
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _parse_ccem(buf: bytes):
    if len(buf) < 4:
        raise Truncated("file shorter than the magic header")
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise Truncated(f"need {n} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    out = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        rid = take(id_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        out.append((rid, data.astype(np.float64)))
    if pos != len(buf):
        raise TrailingBytes(f"{len(buf) - pos} unexpected bytes after last record")
    return out


def read_ccem(path, kind: str = "image") -> list:
    """Read a CCEM store.

    ``kind`` selects the record type: ``"image"``, ``"text"`` or ``"raw"``.
    """
    records = _parse_ccem(Path(path).read_bytes())
    if kind == "raw":
        return [RawRecord(rid, m) for rid, m in records]
    cls_ = {"image": ImageEmbedding, "text": TextEmbedding}[kind]
    out = []
    for rid, m in records:
        if m.shape[0] < 2:
            raise DimMismatch(f"{kind} record {rid!r} needs >= 2 rows, has {m.shape[0]}")
        out.append(cls_(rid, m[0], m[1:]))
    return out


def read_vectors(path) -> dict:
    """Read a CCEM store as ``id -> row 0`` (concept vector stores)."""
    return {rid: m[0] for rid, m in _parse_ccem(Path(path).read_bytes())}


# ---------------------------------------------------------------- manifest

def load_manifest(path, images, texts) -> List[Triplet]:
    """Resolve a JSONL manifest against image and text stores.

    ``images``/``texts`` may be lists of embeddings or dicts keyed by id.
    Concept token indices in the manifest are 1-based.
    """
    img_by_id = images if isinstance(images, dict) else {e.id: e for e in images}
    txt_by_id = texts if isinstance(texts, dict) else {e.id: e for e in texts}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image_id, text_id = rec["image"], rec["text"]
                concepts = rec.get("concepts", [])
                label = rec.get("label")
                spans = [ConceptSpan(c["cui"], tuple(c["tokens"])) for c in concepts]
            except (ValueError, KeyError, TypeError) as exc:
                if isinstance(exc, SpanOutOfRange):
                    raise
                raise MalformedLine(line_no, str(exc)) from None
            if image_id not in img_by_id:
                raise UnknownId(f"line {line_no}: unknown image id {image_id!r}")
            if text_id not in txt_by_id:
                raise UnknownId(f"line {line_no}: unknown text id {text_id!r}")
            if label is not None and not isinstance(label, int):
                raise MalformedLine(line_no, "label must be an integer")
            text = txt_by_id[text_id]
            for span in spans:
                try:
                    span.validate(text.s)
                except SpanOutOfRange as exc:
                    raise SpanOutOfRange(f"line {line_no}: {exc}") from None
            out.append(Triplet(img_by_id[image_id], text, spans, label))
    return out


def write_manifest(triplets: Sequence[Triplet], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            rec = {
                "image": t.image.id,
                "text": t.text.id,
                "concepts": [{"cui": c.cui, "tokens": list(c.token_indices)} for c in t.concepts],
            }
            if t.label is not None:
                rec["label"] = int(t.label)
            fh.write(json.dumps(rec) + "\n")
