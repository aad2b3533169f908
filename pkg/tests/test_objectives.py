import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from concept_align.data import AlignmentParams, ConceptSpan, ImageEmbedding, TextEmbedding, Triplet, TripletBatch
from concept_align.errors import EmptyInput, SpanOutOfRange
from concept_align.gradcheck import check_gradients, random_batch, random_params
from concept_align.numerics import log_sigmoid
from concept_align.objectives import (
    PackedBatch,
    concept_embedding,
    it_align_loss,
    pair_similarity_score,
    rc_align_loss,
    region_concept_matrix,
    total_loss,
    total_loss_grad,
)

LS1 = 0.31326168751822286  # -log sigmoid(1)
LN2 = 0.6931471805599453


def trip(icls, regions, tcls, tokens, spans=(), i=0):
    return Triplet(
        ImageEmbedding(f"i{i}", icls, regions),
        TextEmbedding(f"t{i}", tcls, tokens),
        [ConceptSpan(f"C{j}", s) for j, s in enumerate(spans)],
    )


def oracle_losses(batch, p):
    ts = batch.triplets
    it = oracles.it_align([t.image.cls for t in ts], [t.text.cls for t in ts], p.t_g, p.b_g)
    rc = oracles.rc_align(
        [t.image.regions.tolist() for t in ts],
        [t.text.tokens.tolist() for t in ts],
        [[list(c.token_indices) for c in t.concepts] for t in ts],
        p.t_l,
        p.b_l,
    )
    return it, rc


# ------------------------------------------------------------ IT-Align

def test_it_align_single_pair():
    b = [trip([1, 0], [[1, 0]], [1, 0], [[1, 0]])]
    assert it_align_loss(b, AlignmentParams(t_g=1, b_g=0)) == pytest.approx(LS1, abs=1e-15)


def test_it_align_two_orthogonal_pairs():
    b = [trip([1, 0], [[1, 0]], [1, 0], [[1, 0]], i=0), trip([0, 1], [[0, 1]], [0, 1], [[0, 1]], i=1)]
    want = (2 * LS1 + 2 * LN2) / 2
    assert it_align_loss(b, AlignmentParams(t_g=1, b_g=0)) == pytest.approx(want, abs=1e-15)
    assert want == pytest.approx(1.006408868, abs=1e-9)


def test_it_align_seed7_oracle():
    rng = np.random.default_rng(7)
    b = random_batch(rng, B=2, r=2, s=2, w=0, h=4)
    p = AlignmentParams(t_g=3.0, b_g=0.7)
    assert it_align_loss(b, p) == pytest.approx(oracle_losses(b, p)[0], rel=1e-12)


# ------------------------------------------------------------ RC-Align pieces

def test_concept_embedding():
    t = TextEmbedding("t", [1, 1], [[1, 0], [0, 1]])
    np.testing.assert_array_equal(concept_embedding(t, ConceptSpan("C", [1, 2])), [0.5, 0.5])
    np.testing.assert_array_equal(concept_embedding(t, ConceptSpan("C", [2])), [0, 1])
    with pytest.raises(SpanOutOfRange):
        concept_embedding(TextEmbedding("t", [1], [[1]]), ConceptSpan("C", [2]))


def test_region_concept_matrix_examples():
    im = ImageEmbedding("i", [1, 0], [[1, 0], [0, 1]])
    A = region_concept_matrix(im, [[1, 0]], AlignmentParams(t_l=1, b_l=0))
    np.testing.assert_allclose(A[:, 0], [-LS1, -LN2], rtol=0, atol=1e-15)
    im2 = ImageEmbedding("i", [1, 0], [[-1, 0]])
    assert region_concept_matrix(im2, [[1, 0]], AlignmentParams(t_l=1))[0, 0] == pytest.approx(-1.3132616875182228)
    with pytest.raises(EmptyInput):
        region_concept_matrix(im, [], AlignmentParams())


def test_region_concept_matrix_seed11():
    rng = np.random.default_rng(11)
    im = ImageEmbedding("i", rng.normal(size=4), rng.normal(size=(3, 4)))
    G = rng.normal(size=(2, 4))
    p = AlignmentParams(t_l=4.0, b_l=-0.5)
    A = region_concept_matrix(im, G, p)
    assert A.shape == (3, 2) and np.all(A < 0)
    for i in range(3):
        for j in range(2):
            want = float(oracles.log_sig(p.t_l * oracles.cos(im.regions[i], G[j]) - p.b_l))
            assert A[i, j] == pytest.approx(want, rel=1e-13)


def test_pair_similarity_score():
    assert pair_similarity_score([[-0.3], [-0.7]]) == -0.3
    assert pair_similarity_score([[-0.2, -0.8], [-0.6, -0.4]]) == pytest.approx(-0.3, abs=1e-16)
    rng = np.random.default_rng(0)
    A = -rng.random((5, 3))
    assert pair_similarity_score(A) == pytest.approx(sum(max(A[:, j]) for j in range(3)) / 3, abs=1e-15)
    with pytest.raises(EmptyInput):
        pair_similarity_score(np.zeros((0, 2)))


def test_rc_align_single_pair_is_negated_score():
    b = [trip([1, 0], [[1, 0], [0, 1]], [1, 0], [[1, 0], [1, 1]], spans=[[1]])]
    assert rc_align_loss(b, AlignmentParams(t_l=1, b_l=0)) == pytest.approx(LS1, abs=1e-15)


def test_rc_align_identical_scores_cancel():
    b = [trip([1, 0], [[1, 0]], [1, 0], [[1, 0]], spans=[[1]], i=i) for i in range(2)]
    assert rc_align_loss(b, AlignmentParams()) == pytest.approx(0.0, abs=1e-15)


def test_rc_align_seed3_oracle():
    rng = np.random.default_rng(3)
    b = random_batch(rng, B=3, r=4, s=5, w=2, h=6)
    p = AlignmentParams(t_l=6.0, b_l=0.3)
    assert rc_align_loss(b, p) == pytest.approx(oracle_losses(b, p)[1], rel=1e-12)


def test_concept_free_texts_only_feed_it_align():
    rng = np.random.default_rng(5)
    b = random_batch(rng, B=3, r=2, s=3, w=0, h=4)
    assert rc_align_loss(b, AlignmentParams()) == 0.0
    lb = total_loss(b, AlignmentParams(alpha=0.5))
    assert lb.total == lb.it_align


# ------------------------------------------------------------ total

def test_total_combinations():
    rng = np.random.default_rng(9)
    b = random_batch(rng, B=3, r=3, s=4, w=2, h=5)
    lb0 = total_loss(b, AlignmentParams(alpha=0.0))
    assert lb0.total == lb0.it_align
    lb2 = total_loss(b, AlignmentParams(alpha=2.0))
    assert lb2.total - lb2.it_align == pytest.approx(2 * lb2.rc_align, abs=1e-12)
    assert lb2.total == lb2.it_align + 2.0 * lb2.rc_align


def test_dtotal_dalpha_is_rc():
    rng = np.random.default_rng(10)
    b = random_batch(rng, B=3, r=3, s=4, w=2, h=5)
    p = AlignmentParams(alpha=0.5)
    lb, g = total_loss_grad(b, p)
    eps = 1e-6
    num = (total_loss(b, p.replace(alpha=0.5 + eps)).total - total_loss(b, p.replace(alpha=0.5 - eps)).total) / (2 * eps)
    assert num == pytest.approx(lb.rc_align, rel=1e-7)
    assert g.alpha == lb.rc_align


def _cfg(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(1, 5))
    h = int(rng.integers(1, 9))
    return random_batch(rng, B, 6, 6, 3, h, vary=True), random_params(rng)


@pytest.mark.parametrize("seed", range(25))
def test_losses_match_literal_oracle(seed):
    b, p = _cfg(seed)
    it, rc = oracle_losses(b, p)
    lb = total_loss(b, p)
    assert lb.it_align == pytest.approx(it, rel=1e-12)
    assert lb.rc_align == pytest.approx(rc, rel=1e-12, abs=1e-300)
    assert lb.total == pytest.approx(it + p.alpha * rc, rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_rescaling_invariance(seed, c):
    b, p = _cfg(seed)
    ts = b.triplets
    m = seed % len(ts)
    t = ts[m]
    scaled_cls = TripletBatch(
        ts[:m] + [Triplet(ImageEmbedding(t.image.id, c * t.image.cls, t.image.regions), t.text, t.concepts)] + ts[m + 1:]
    )
    regions = t.image.regions.copy()
    regions[seed % regions.shape[0]] *= c
    scaled_row = TripletBatch(
        ts[:m] + [Triplet(ImageEmbedding(t.image.id, t.image.cls, regions), t.text, t.concepts)] + ts[m + 1:]
    )
    assert it_align_loss(scaled_cls, p) == pytest.approx(it_align_loss(b, p), abs=1e-10)
    assert rc_align_loss(scaled_row, p) == pytest.approx(rc_align_loss(b, p), abs=1e-10)


@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_permutation_invariance(seed, rnd):
    b, p = _cfg(seed)
    perm = list(b.triplets)
    rnd.shuffle(perm)
    a, c = total_loss(b, p), total_loss(perm, p)
    for x, y in ((a.it_align, c.it_align), (a.rc_align, c.rc_align), (a.total, c.total)):
        assert x == pytest.approx(y, rel=1e-12, abs=1e-12)


@given(st.integers(0, 10_000))
def test_similarity_bounds(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    r, w, h = (int(v) for v in rng.integers(1, 6, size=3))
    im = ImageEmbedding("i", rng.normal(size=h), rng.normal(size=(r, h)))
    A = region_concept_matrix(im, rng.normal(size=(w, h)), p)
    assert np.all(A < 0)
    S = pair_similarity_score(A)
    lo, hi = log_sigmoid(-p.t_l - p.b_l), log_sigmoid(p.t_l - p.b_l)
    assert lo - 1e-12 <= S <= hi + 1e-12


def test_gradient_shapes_follow_inputs():
    rng = np.random.default_rng(4)
    b = random_batch(rng, 3, 5, 5, 2, 4, vary=True)
    _, g = total_loss_grad(b, AlignmentParams())
    for t, gr, gt in zip(b.triplets, g.regions, g.tokens):
        assert gr.shape == t.image.regions.shape and gt.shape == t.text.tokens.shape
    assert all(np.all(np.isfinite(x)) for x in g.image_cls + g.regions + g.text_cls + g.tokens)


def test_gradient_seed42_configuration():
    rng = np.random.default_rng(42)
    b = random_batch(rng, B=3, r=4, s=5, w=2, h=6)
    assert check_gradients(b, AlignmentParams(t_g=5, b_g=1, t_l=7, b_l=-1, alpha=0.5)).max_rel_error < 1e-4


def test_b_g_gradient_symmetric_two_batch():
    b = [trip([1, 0], [[1, 0]], [1, 0], [[1, 0]], spans=[[1]], i=0), trip([0, 1], [[0, 1]], [0, 1], [[0, 1]], spans=[[1]], i=1)]
    rep = check_gradients(TripletBatch(b), AlignmentParams(t_g=1, b_g=0))
    assert rep.max_rel_error < 1e-4


def test_tie_subgradient_goes_to_lowest_region():
    # two identical regions: the whole gradient must land on region 0
    b = [trip([1, 0.2], [[1, 0.5], [1, 0.5]], [0.3, 1], [[1, 0.1]], spans=[[1]])]
    _, g = total_loss_grad(b, AlignmentParams())
    assert np.any(g.regions[0][0] != 0) and np.all(g.regions[0][1] == 0)


def test_packed_batch_matches_list_input():
    rng = np.random.default_rng(12)
    b = random_batch(rng, 3, 4, 4, 2, 3)
    p = AlignmentParams()
    assert total_loss(PackedBatch.from_batch(b), p) == total_loss(b, p) == total_loss(b.triplets, p)


def test_log_terms_stay_finite_at_large_logits():
    b = [trip([1, 0], [[1, 0]], [-1, 0], [[-1, 0]], spans=[[1]])]
    lb = total_loss(b, AlignmentParams(t_g=1000, t_l=1000))
    assert math.isfinite(lb.total) and lb.it_align == pytest.approx(1000, rel=1e-12)
