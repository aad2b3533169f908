import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from concept_align.data import AlignmentParams, ImageEmbedding
from concept_align.errors import EmptySet, SingleClass, UnknownClass, VocabMismatch
from concept_align.explain import (
    DEFAULT_C,
    ConceptBottleneck,
    concept_class_association,
    concept_presence_difference,
    concept_similarity_features,
    disease_level_inspection,
    presence_difference,
    region_saliency,
    train_cbm,
)
from concept_align.toy import SyntheticSpec, ablation_config, concept_prompts, generate_synthetic, train


def bottleneck(col, ids=None):
    col = np.asarray(col, float)
    ids = ids or [f"concept{j}" for j in range(len(col))]
    return ConceptBottleneck(np.column_stack([col, -col]), [0.0, 0.0], ids, ["x", "y"])


def planted_features(rng, n_per_class=10, n_classes=4, per_class=2, noise=0.1):
    K = n_classes * per_class
    X, y = [], []
    for c in range(n_classes):
        for _ in range(n_per_class):
            f = np.zeros(K)
            f[c * per_class:(c + 1) * per_class] = 1.0
            X.append(f + noise * rng.normal(size=K))
            y.append(c)
    return np.array(X), np.array(y)


# ------------------------------------------------------------ features

def test_similarity_features():
    im = ImageEmbedding("i", [2, 0], [[1, 0]])
    np.testing.assert_array_equal(concept_similarity_features(im, [[1, 0], [0, 3]]), [1.0, 0.0])
    assert concept_similarity_features(im, []).shape == (0,)
    rng = np.random.default_rng(5)
    im = ImageEmbedding("i", rng.normal(size=6), rng.normal(size=(4, 6)))
    G = rng.normal(size=(3, 6))
    f = concept_similarity_features(im, G)
    for j in range(3):
        assert f[j] == pytest.approx(oracles.cos(im.cls, G[j]), abs=1e-15)
    fused = concept_similarity_features(im, G, mode="fused", k=2)
    assert fused.shape == (3,) and np.all(np.abs(fused) <= 1)


# ------------------------------------------------------------ bottleneck

def test_cbm_one_dimensional_separable():
    X = np.array([[-1.0]] * 5 + [[1.0]] * 5)
    y = [0] * 5 + [1] * 5
    cbm = train_cbm(X, y, DEFAULT_C)
    assert np.all(cbm.predict(X) == np.array(y))
    assert cbm.weights[0, 1] > 0 > cbm.weights[0, 0]


def test_cbm_rejects_single_class():
    with pytest.raises(SingleClass):
        train_cbm(np.ones((4, 2)), [1, 1, 1, 1])


def test_cbm_duplication_invariance(rng):
    X, y = planted_features(rng, n_per_class=5)
    a = train_cbm(X, y)
    b = train_cbm(np.vstack([X, X]), np.concatenate([y, y]))
    np.testing.assert_allclose(b.weights, a.weights, rtol=0, atol=1e-8)
    np.testing.assert_allclose(b.bias, a.bias, rtol=0, atol=1e-8)


@given(st.integers(0, 2**31))
def test_cbm_order_invariance(seed):
    rng = np.random.default_rng(seed)
    X, y = planted_features(rng, n_per_class=4, n_classes=3)
    perm = rng.permutation(len(y))
    a, b = train_cbm(X, y), train_cbm(X[perm], y[perm])
    assert np.max(np.abs(a.weights - b.weights)) <= 1e-10
    assert np.max(np.abs(a.bias - b.bias)) <= 1e-10


def test_cbm_converges_to_stationary_point(rng):
    X, y = planted_features(rng)
    cbm = train_cbm(X, y, DEFAULT_C)
    # gradient of mean cross-entropy + ||W||^2 / (2C) at the returned weights
    P = cbm.predict_proba(X)
    Y = np.eye(4)[y]
    gW = X.T @ (P - Y) / len(y) + cbm.weights / DEFAULT_C
    gb = (P - Y).mean(axis=0)
    assert max(np.abs(gW).max(), np.abs(gb).max()) < 1e-6


def test_cbm_planted_signs_and_accuracy(rng):
    X, y = planted_features(rng)
    cbm = train_cbm(X, y, DEFAULT_C, concept_ids=[f"c{j}" for j in range(8)])
    assert np.mean(cbm.predict(X) == y) == 1.0
    for j in range(8):
        owner = j // 2
        assert cbm.weights[j, owner] > 0
        assert np.all(np.delete(cbm.weights[j], owner) < 0)


def test_cbm_json_roundtrip(tmp_path, rng):
    X, y = planted_features(rng, n_per_class=3)
    cbm = train_cbm(X, [f"class{v}" for v in y])
    cbm.save(tmp_path / "c.json")
    back = ConceptBottleneck.load(tmp_path / "c.json")
    np.testing.assert_array_equal(back.weights, cbm.weights)
    assert back.class_ids == ["class0", "class1", "class2", "class3"]


# ------------------------------------------------------------ association and inspection

def test_association_ranking():
    cbm = bottleneck([0.5, -0.2, 0.9])
    assert [c for c, _ in concept_class_association(cbm, "x")] == ["concept2", "concept0", "concept1"]
    assert concept_class_association(cbm, "x", top_n=1) == [("concept2", 0.9)]
    flat = bottleneck([0.1, 0.1, 0.1], ids=["b", "c", "a"])
    assert [c for c, _ in concept_class_association(flat, "x")] == ["a", "b", "c"]
    with pytest.raises(UnknownClass):
        concept_class_association(cbm, "z")


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_association_invariant_to_positive_scaling(col, c):
    ids = [f"k{j}" for j in range(len(col))]
    a = [x for x, _ in concept_class_association(bottleneck(col, ids), "x")]
    scaled = [x for x, _ in concept_class_association(bottleneck(np.asarray(col) * c, ids), "x")]
    if len(set(col)) == len(col):
        assert a == scaled


def test_disease_level_inspection():
    cbm = bottleneck([0.5, -0.2, 0.9])
    assert disease_level_inspection([cbm], "x") == concept_class_association(cbm, "x")
    neg = bottleneck([-0.5, 0.2, -0.9])
    assert disease_level_inspection([cbm, neg], "x") == [("concept0", 0.0), ("concept1", 0.0), ("concept2", 0.0)]
    three = [bottleneck([a, b], ids=["A", "B"]) for a, b in [(0.9, 0.1), (0.8, 0.9), (0.7, 0.2)]]
    ranked = disease_level_inspection(three, "x")
    assert [c for c, _ in ranked] == ["A", "B"]
    assert ranked[0][1] == pytest.approx(0.8) and ranked[1][1] == pytest.approx(0.4)
    with pytest.raises(VocabMismatch):
        disease_level_inspection([cbm, bottleneck([1, 2, 3], ids=["p", "q", "r"])], "x")
    with pytest.raises(UnknownClass):
        disease_level_inspection([cbm], "nope")


# ------------------------------------------------------------ saliency

def test_saliency_examples(rng):
    im = ImageEmbedding("i", [1, 0, 0], [[0, 1, 0], [0, 0, 2]])
    np.testing.assert_array_equal(region_saliency(im, [1, 0, 0]), [0, 0])
    im = ImageEmbedding("i", rng.normal(size=5), rng.normal(size=(6, 5)))
    g = rng.normal(size=5)
    s = region_saliency(im, g)
    for i in range(6):
        assert s[i] == pytest.approx(oracles.cos(im.regions[i], g), abs=1e-15)
    scaled = ImageEmbedding("i", im.cls, im.regions * rng.uniform(0.1, 10, size=(6, 1)))
    np.testing.assert_allclose(region_saliency(scaled, g), s, rtol=0, atol=1e-12)


# ------------------------------------------------------------ presence difference

def test_presence_difference_formula():
    pos = np.zeros((10, 1), bool)
    pos[:8] = True
    neg = np.zeros((10, 1), bool)
    neg[:2] = True
    row = presence_difference(pos, neg, ["C1"]).rows[0]
    assert (row.n_pos, row.n_neg, row.D) == (8, 2, pytest.approx(0.6, abs=1e-15))
    assert row.D == 8 / 10 - 2 / 10
    with pytest.raises(EmptySet):
        presence_difference(np.zeros((0, 1), bool), neg, ["C1"])


@given(st.integers(0, 2**31))
def test_presence_difference_properties(seed):
    rng = np.random.default_rng(seed)
    M, N, K = (int(v) for v in rng.integers(1, 12, size=3))
    pos, neg = rng.random((M, K)) < 0.5, rng.random((N, K)) < 0.5
    cuis = [f"C{j}" for j in range(K)]
    rep = presence_difference(pos, neg, cuis)
    sw = presence_difference(neg, pos, cuis)
    same = presence_difference(pos, pos, cuis)
    dup = presence_difference(np.vstack([pos] * 3), np.vstack([neg] * 3), cuis)
    for a, b, c, d in zip(rep.rows, sw.rows, same.rows, dup.rows):
        assert -1.0 <= a.D <= 1.0
        assert b.D == -a.D
        assert c.D == 0.0
        assert d.D == a.D


def test_report_csv_sorted(tmp_path):
    pos = np.array([[True, False, True]])
    neg = np.array([[False, False, True]])
    rep = presence_difference(pos, neg, ["B", "A", "C"])
    text = rep.to_csv(tmp_path / "d.csv")
    assert text.splitlines() == [
        "cui,n_pos,n_neg,prop_pos,prop_neg,D",
        "B,1,0,1.0,0.0,1.0",
        "A,0,0,0.0,0.0,0.0",
        "C,1,1,1.0,1.0,0.0",
    ]
    assert (tmp_path / "d.csv").read_text() == text


@pytest.fixture(scope="module")
def zero_noise_model():
    spec = SyntheticSpec(noise_sigma=0.0, seed=2)
    enc, params, _ = train(ablation_config(seed=2), generate_synthetic(spec, 1))
    return enc, params, generate_synthetic(spec, 2)


def test_saliency_on_raw_planted_image():
    ds = generate_synthetic(SyntheticSpec(noise_sigma=0.0, seed=3))
    for smp in ds.samples:
        im = ImageEmbedding("raw", smp.image.mean(axis=0), smp.image)
        for cui, slot in smp.region_slots.items():
            assert int(np.argmax(region_saliency(im, ds.world.image_protos[int(cui[1:])]))) == slot


def test_saliency_finds_planted_region_after_training(zero_noise_model):
    enc, _, held = zero_noise_model
    T = enc.encode_text(held.world.text_protos).tokens
    for smp in held.samples:
        im = enc.encode_image(smp.image)
        for cui, slot in smp.region_slots.items():
            assert int(np.argmax(region_saliency(im, T[int(cui[1:])]))) == slot


def test_planted_concepts_characterise_their_class(zero_noise_model):
    enc, params, held = zero_noise_model
    prompts = concept_prompts(enc, held.world)
    images = [enc.encode_image(s.image) for s in held.samples]
    labels = [s.label for s in held.samples]
    for c, planted in enumerate(held.world.class_concepts):
        pos = [im for im, y in zip(images, labels) if y == c]
        neg = [im for im, y in zip(images, labels) if y != c]
        rep = concept_presence_difference(pos, neg, prompts, params, k=2).by_cui()
        for j in planted:
            assert rep[held.world.cui(j)].D > 0.5
