"""Dual-alignment training objectives and their analytic gradients.

Global image-text alignment (IT-Align) is a pairwise sigmoid loss over the
normalised [CLS] vectors of a batch. Region-concept alignment (RC-Align)
scores every (image, text) pair by the mean, over the text's concepts, of the
best-matching region's log-sigmoid similarity, and the loss is the signed
sum of those scores. ``total = it_align + alpha * rc_align``.

All batch math runs on a padded representation (``PackedBatch``) so a loss
evaluation is a fixed number of numpy calls regardless of batch size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import AlignmentParams, ConceptSpan, ImageEmbedding, TextEmbedding, TripletBatch
from .errors import EmptyInput, SpanOutOfRange, ZeroNorm
from .numerics import ZERO_NORM_EPS, cosine_matrix, log_sigmoid, mean_pool


@dataclass
class LossBreakdown:
    it_align: float
    rc_align: float
    total: float
    alpha: float


@dataclass
class GradientSet:
    """Gradients of the total loss; list entries follow batch order."""

    image_cls: List[np.ndarray]
    regions: List[np.ndarray]
    text_cls: List[np.ndarray]
    tokens: List[np.ndarray]
    t_g: float
    b_g: float
    t_l: float
    b_l: float
    alpha: float


# ------------------------------------------------------------ single pairs

def concept_embedding(text: TextEmbedding, span: ConceptSpan) -> np.ndarray:
    """Mean of the token rows a concept span covers (1-based indices)."""
    span.validate(text.s)
    idx = np.asarray(span.token_indices) - 1
    return mean_pool(text.tokens[idx])


def region_concept_matrix(image: ImageEmbedding, concept_embs, params: AlignmentParams) -> np.ndarray:
    """r x w matrix of log sigmoid(t_l * cos(region_i, concept_j) - b_l)."""
    if len(concept_embs) == 0:
        raise EmptyInput("region_concept_matrix needs at least one concept")
    a = cosine_matrix(image.regions, np.asarray(concept_embs, dtype=np.float64))
    return log_sigmoid(params.t_l * a - params.b_l)


def pair_similarity_score(A) -> float:
    """Mean over concepts (columns) of the best region score (column max)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise EmptyInput("similarity matrix is empty")
    return float(A.max(axis=0).mean())


# ------------------------------------------------------------ packed batches

def _safe_norms(x, mask=None):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if mask is not None:
        n = np.where(mask[..., None], n, 1.0)
    if np.any(n < ZERO_NORM_EPS):
        raise ZeroNorm("zero-norm embedding in batch")
    return n


@dataclass
class PackedBatch:
    """Dense, padded view of a batch.

    image_cls (B,h); regions (B,R,h) with region_mask (B,R); text_cls (B,h);
    tokens (B,S,h). ``concepts`` lists (text index, 0-based token indices).
    """

    image_cls: np.ndarray
    regions: np.ndarray
    region_mask: np.ndarray
    text_cls: np.ndarray
    tokens: np.ndarray
    concepts: Sequence[tuple]
    region_counts: Optional[np.ndarray] = None
    token_counts: Optional[np.ndarray] = None
    _pool: np.ndarray = field(init=False, repr=False)
    _owner: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        B, S = self.tokens.shape[:2]
        nc = len(self.concepts)
        pool = np.zeros((nc, B * S))
        owner = np.zeros((nc, B))
        counts = np.zeros(B)
        for n, _ in self.concepts:
            counts[n] += 1
        for j, (n, idx) in enumerate(self.concepts):
            idx = np.asarray(idx)
            pool[j, n * S + idx] = 1.0 / len(idx)
            owner[j, n] = 1.0 / counts[n]
        self._pool = pool
        self._owner = owner

    @property
    def size(self):
        return self.image_cls.shape[0]

    @classmethod
    def from_batch(cls, batch: TripletBatch) -> "PackedBatch":
        trips = batch.triplets
        B = len(trips)
        h = trips[0].image.h
        R = max(t.image.r for t in trips)
        S = max(t.text.s for t in trips)
        regions = np.zeros((B, R, h))
        mask = np.zeros((B, R), dtype=bool)
        tokens = np.zeros((B, S, h))
        concepts = []
        rc = np.zeros(B, dtype=int)
        sc = np.zeros(B, dtype=int)
        for m, t in enumerate(trips):
            r, s = t.image.r, t.text.s
            regions[m, :r] = t.image.regions
            mask[m, :r] = True
            tokens[m, :s] = t.text.tokens
            rc[m], sc[m] = r, s
            for span in t.concepts:
                concepts.append((m, np.asarray(span.token_indices) - 1))
        return cls(
            np.stack([t.image.cls for t in trips]),
            regions,
            mask,
            np.stack([t.text.cls for t in trips]),
            tokens,
            concepts,
            rc,
            sc,
        )


@dataclass
class _Grads:
    image_cls: np.ndarray
    regions: np.ndarray
    text_cls: np.ndarray
    tokens: np.ndarray
    t_g: float
    b_g: float
    t_l: float
    b_l: float


def packed_loss(pb: PackedBatch, params: AlignmentParams, alpha=None, need_grad=False):
    """Return (it, rc, total[, grads]) for a packed batch.

    ``alpha`` overrides ``params.alpha`` when given.
    """
    alpha = params.alpha if alpha is None else alpha
    B = pb.size
    Z = 2.0 * np.eye(B) - 1.0

    # IT-Align
    xnorm = _safe_norms(pb.image_cls)
    ynorm = _safe_norms(pb.text_cls)
    xn = pb.image_cls / xnorm
    yn = pb.text_cls / ynorm
    D = xn @ yn.T
    U = Z * (params.t_g * D - params.b_g)
    it = -log_sigmoid(U).sum() / B

    # RC-Align
    nc = len(pb.concepts)
    rc = 0.0
    if nc:
        rnorm = _safe_norms(pb.regions, pb.region_mask)
        Rn = pb.regions / rnorm
        G = pb._pool @ pb.tokens.reshape(B * pb.tokens.shape[1], -1)
        gnorm = _safe_norms(G)
        Gn = G / gnorm
        Bn, R, h = Rn.shape
        a = (Rn.reshape(Bn * R, h) @ Gn.T).reshape(Bn, R, nc)
        u = params.t_l * a - params.b_l
        u[~pb.region_mask] = -np.inf
        # log-sigmoid is increasing, so the column max of A sits at the max of u
        best = u.argmax(axis=1)  # lowest region index on ties
        u_sel = np.take_along_axis(u, best[:, None, :], axis=1)[:, 0, :]
        M = log_sigmoid(u_sel)
        S = M @ pb._owner
        rc = -(Z * S).sum() / B
    total = it + alpha * rc
    if not need_grad:
        return it, rc, total

    # backward: IT-Align
    dU = -np.exp(log_sigmoid(-U)) / B
    dD = dU * Z * params.t_g
    d_tg = float((dU * Z * D).sum())
    d_bg = float(-(dU * Z).sum())
    dxn = dD @ yn
    dyn = dD.T @ xn
    d_img_cls = (dxn - xn * (xn * dxn).sum(-1, keepdims=True)) / xnorm
    d_txt_cls = (dyn - yn * (yn * dyn).sum(-1, keepdims=True)) / ynorm

    d_regions = np.zeros_like(pb.regions)
    d_tokens = np.zeros_like(pb.tokens)
    d_tl = d_bl = 0.0
    if nc:
        dS = -alpha * Z / B
        dM = dS @ pb._owner.T  # (B, nc)
        a_sel = np.take_along_axis(a, best[:, None, :], axis=1)[:, 0, :]
        du = dM * np.exp(log_sigmoid(-u_sel))
        d_tl = float((du * a_sel).sum())
        d_bl = float(-du.sum())
        da = np.zeros_like(a)
        np.put_along_axis(da, best[:, None, :], (du * params.t_l)[:, None, :], axis=1)
        da2 = da.reshape(Bn * R, nc)
        dRn = (da2 @ Gn).reshape(Bn, R, h)
        dGn = da2.T @ Rn.reshape(Bn * R, h)
        d_regions = (dRn - Rn * (Rn * dRn).sum(-1, keepdims=True)) / rnorm
        d_regions[~pb.region_mask] = 0.0
        dG = (dGn - Gn * (Gn * dGn).sum(-1, keepdims=True)) / gnorm
        d_tokens = (pb._pool.T @ dG).reshape(pb.tokens.shape)

    grads = _Grads(d_img_cls, d_regions, d_txt_cls, d_tokens, d_tg, d_bg, d_tl, d_bl)
    return it, rc, total, grads


# ------------------------------------------------------------ public API

def _pack(batch) -> PackedBatch:
    if isinstance(batch, PackedBatch):
        return batch
    if not isinstance(batch, TripletBatch):
        batch = TripletBatch(batch)
    return PackedBatch.from_batch(batch)


def it_align_loss(batch, params: AlignmentParams) -> float:
    return float(packed_loss(_pack(batch), params)[0])


def rc_align_loss(batch, params: AlignmentParams) -> float:
    return float(packed_loss(_pack(batch), params)[1])


def total_loss(batch, params: AlignmentParams) -> LossBreakdown:
    it, rc, total = packed_loss(_pack(batch), params)
    return LossBreakdown(float(it), float(rc), float(total), params.alpha)


def total_loss_grad(batch, params: AlignmentParams):
    """Loss breakdown plus gradients w.r.t. every embedding and scalar.

    At ties in the per-concept region max the subgradient goes to the lowest
    region index.
    """
    pb = _pack(batch)
    it, rc, total, g = packed_loss(pb, params, need_grad=True)
    B = pb.size
    rcount = pb.region_counts if pb.region_counts is not None else pb.region_mask.sum(1)
    scount = pb.token_counts if pb.token_counts is not None else np.full(B, pb.tokens.shape[1])
    gs = GradientSet(
        image_cls=[g.image_cls[m] for m in range(B)],
        regions=[g.regions[m, : rcount[m]] for m in range(B)],
        text_cls=[g.text_cls[m] for m in range(B)],
        tokens=[g.tokens[m, : scount[m]] for m in range(B)],
        t_g=g.t_g,
        b_g=g.b_g,
        t_l=g.t_l,
        b_l=g.b_l,
        alpha=float(rc),
    )
    return LossBreakdown(float(it), float(rc), float(total), params.alpha), gs
