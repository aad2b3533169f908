import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from concept_align.data import (
    AlignmentParams,
    ConceptSpan,
    ImageEmbedding,
    RawRecord,
    TextEmbedding,
    Triplet,
    TripletBatch,
    load_manifest,
    read_ccem,
    read_vectors,
    write_ccem,
    write_manifest,
)
from concept_align.errors import (
    BadMagic,
    DimMismatch,
    MalformedLine,
    SpanOutOfRange,
    TrailingBytes,
    Truncated,
    UnknownId,
    UnsupportedVersion,
)


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def make_store(rng, n, r, h, kind=ImageEmbedding, prefix="x"):
    return [kind(f"{prefix}{i}", rng.normal(size=h), rng.normal(size=(r, h))) for i in range(n)]


def test_header_layout(tmp_path):
    rec = ImageEmbedding("ab", [1.0, 2.0], [[3.0, 4.0]])
    write_ccem([rec], tmp_path / "s.ccem")
    raw = (tmp_path / "s.ccem").read_bytes()
    expected = b"CCEM" + struct.pack("<IIH", 1, 1, 2) + b"ab" + struct.pack("<II", 2, 2)
    expected += struct.pack("<4f", 1, 2, 3, 4)
    assert raw == expected


def test_roundtrip_equals_f32_view(tmp_path, rng):
    store = make_store(rng, 3, 4, 5)
    write_ccem(store, tmp_path / "a.ccem")
    back = read_ccem(tmp_path / "a.ccem")
    assert [b.id for b in back] == [s.id for s in store]
    for s, b in zip(store, back):
        assert b == ImageEmbedding(s.id, f32(s.cls), f32(s.regions))
    # re-writing a read store reproduces the file byte for byte
    write_ccem(back, tmp_path / "b.ccem")
    assert (tmp_path / "a.ccem").read_bytes() == (tmp_path / "b.ccem").read_bytes()


@given(
    n=st.integers(0, 4),
    r=st.integers(1, 4),
    h=st.integers(1, 5),
    seed=st.integers(0, 2**32 - 1),
    ident=st.text(min_size=0, max_size=6),
)
def test_roundtrip_property(tmp_path_factory, n, r, h, seed, ident):
    rng = np.random.default_rng(seed)
    store = make_store(rng, n, r, h, TextEmbedding, prefix=ident)
    p = tmp_path_factory.mktemp("rt") / "s.ccem"
    write_ccem(store, p)
    back = read_ccem(p, kind="text")
    assert back == [TextEmbedding(s.id, f32(s.cls), f32(s.tokens)) for s in store]


def test_empty_store(tmp_path):
    write_ccem([], tmp_path / "e.ccem")
    assert (tmp_path / "e.ccem").read_bytes() == b"CCEM" + struct.pack("<II", 1, 0)
    assert read_ccem(tmp_path / "e.ccem") == []


def test_mixed_dims_rejected(tmp_path, rng):
    store = make_store(rng, 1, 2, 3) + make_store(rng, 1, 2, 4)
    with pytest.raises(DimMismatch):
        write_ccem(store, tmp_path / "m.ccem")


def test_raw_records_and_vectors(tmp_path):
    write_ccem([RawRecord("C1", [[1.0, 2.0]]), RawRecord("C2", [[0.5, -1.0]])], tmp_path / "v.ccem")
    vecs = read_vectors(tmp_path / "v.ccem")
    np.testing.assert_array_equal(vecs["C2"], [0.5, -1.0])
    with pytest.raises(DimMismatch):
        read_ccem(tmp_path / "v.ccem", kind="image")  # a lone row has no regions


@pytest.fixture
def good_bytes(tmp_path, rng):
    write_ccem(make_store(rng, 2, 3, 2), tmp_path / "g.ccem")
    return (tmp_path / "g.ccem").read_bytes()


@pytest.mark.parametrize(
    "mutate, error",
    [
        (lambda b: b"XXXX" + b[4:], BadMagic),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], UnsupportedVersion),
        (lambda b: b[:-3], Truncated),
        (lambda b: b[:20], Truncated),
        (lambda b: b[:2], Truncated),
        (lambda b: b + b"\x00", TrailingBytes),
        (lambda b: b[:8] + struct.pack("<I", 1) + b[12:], TrailingBytes),
        (lambda b: b[:8] + struct.pack("<I", 3) + b[12:], Truncated),
    ],
)
def test_corrupted_files(tmp_path, good_bytes, mutate, error):
    p = tmp_path / "bad.ccem"
    p.write_bytes(mutate(good_bytes))
    with pytest.raises(error):
        read_ccem(p)


def test_span_rules():
    assert ConceptSpan("C", [1, 3]).token_indices == (1, 3)
    with pytest.raises(SpanOutOfRange):
        ConceptSpan("C", [2, 2])
    with pytest.raises(SpanOutOfRange):
        ConceptSpan("C", [])
    with pytest.raises(SpanOutOfRange):
        ConceptSpan("C", [2]).validate(1)
    with pytest.raises(SpanOutOfRange):
        ConceptSpan("C", [0]).validate(3)


def test_params_validation():
    p = AlignmentParams()
    assert (p.t_g, p.b_g, p.t_l, p.b_l, p.alpha, p.beta, p.k) == (10, 0, 10, 0, 0.5, 0.5, 16)
    for bad in (dict(t_g=0), dict(t_l=-1), dict(beta=1.5), dict(alpha=-0.1), dict(k=0)):
        with pytest.raises(ValueError):
            AlignmentParams(**bad)
    assert p.replace(beta=0.0).beta == 0.0 and p.beta == 0.5


def test_batch_pairing():
    z = TripletBatch([None, None, None]).pairing()
    np.testing.assert_array_equal(z, 2 * np.eye(3) - 1)
    with pytest.raises(ValueError):
        TripletBatch([])


@pytest.fixture
def stores(rng):
    images = make_store(rng, 3, 2, 4, ImageEmbedding, "img")
    texts = make_store(rng, 3, 3, 4, TextEmbedding, "txt")
    return images, texts


def _write_lines(path, recs):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in recs), encoding="utf-8")


def test_manifest_roundtrip_and_order(tmp_path, stores):
    images, texts = stores
    recs = [
        {"image": "img2", "text": "txt0", "concepts": [{"cui": "C1", "tokens": [1, 3]}], "label": 1},
        {"image": "img0", "text": "txt2", "concepts": []},
    ]
    _write_lines(tmp_path / "m.jsonl", recs)
    trips = load_manifest(tmp_path / "m.jsonl", images, texts)
    assert [t.image.id for t in trips] == ["img2", "img0"]
    assert trips[0].concepts[0].token_indices == (1, 3) and trips[0].label == 1
    assert trips[1].label is None
    write_manifest(trips, tmp_path / "m2.jsonl")
    assert load_manifest(tmp_path / "m2.jsonl", images, texts) == trips


@pytest.mark.parametrize(
    "line, error, line_no",
    [
        ("{not json", MalformedLine, 2),
        (json.dumps({"image": "img0"}), MalformedLine, 2),
        (json.dumps({"image": "nope", "text": "txt0"}), UnknownId, None),
        (json.dumps({"image": "img0", "text": "nope"}), UnknownId, None),
        (json.dumps({"image": "img0", "text": "txt0", "concepts": [{"cui": "C", "tokens": [4]}]}), SpanOutOfRange, None),
        (json.dumps({"image": "img0", "text": "txt0", "label": "x"}), MalformedLine, 2),
    ],
)
def test_manifest_errors(tmp_path, stores, line, error, line_no):
    images, texts = stores
    good = json.dumps({"image": "img1", "text": "txt1"})
    _write_lines(tmp_path / "m.jsonl", [good, line])
    with pytest.raises(error) as exc:
        load_manifest(tmp_path / "m.jsonl", images, texts)
    if line_no is not None:
        assert exc.value.line_no == line_no


def test_triplet_checks_dims(rng):
    im = ImageEmbedding("i", rng.normal(size=3), rng.normal(size=(2, 3)))
    tx = TextEmbedding("t", rng.normal(size=4), rng.normal(size=(2, 4)))
    with pytest.raises(DimMismatch):
        Triplet(im, tx)
