"""Dual-path zero-shot scoring, retrieval and concept annotation.

Each class is scored twice: globally, by the cosine between the image and
class [CLS] vectors, and locally, by pooling the top-k regions per class
concept and comparing against the mean concept vector. The two softmax
distributions are mixed with weight ``beta`` on the local path.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import AlignmentParams, ImageEmbedding, TextEmbedding
from .errors import EmptyStore, KTooLarge, NoConcepts, ZeroNorm
from .numerics import ZERO_NORM_EPS, cosine, cosine_matrix, softmax

DEFAULT_K = 16


@dataclass
class ClassSpec:
    class_id: str
    text: TextEmbedding
    concept_embs: list = field(default_factory=list)

    @property
    def w(self) -> int:
        return len(self.concept_embs)


@dataclass
class Prediction:
    p_g: np.ndarray
    p_l: np.ndarray
    p: np.ndarray
    argmax: int
    s_g: np.ndarray = None
    s_l: np.ndarray = None


def default_k(r: int) -> int:
    return min(DEFAULT_K, r)


def global_score(image: ImageEmbedding, cls_: ClassSpec, params: AlignmentParams) -> float:
    return params.t_g * cosine(image.cls, cls_.text.cls) + params.b_g


def topk_regions(image: ImageEmbedding, concept, k: int) -> np.ndarray:
    """Indices of the k regions most similar to ``concept``.

    Ordered by decreasing cosine; equal cosines keep the lower index first.
    """
    if k < 1 or k > image.r:
        raise KTooLarge(f"k={k} outside 1..{image.r}")
    sims = cosine_matrix(image.regions, np.asarray(concept)[None, :])[:, 0]
    return np.argsort(-sims, kind="stable")[:k]


def _pooled_local(image, concept_embs, k):
    """Pooled region vector and mean concept vector for the local path."""
    concept_embs = np.asarray(concept_embs, dtype=np.float64)
    if k < 1 or k > image.r:
        raise KTooLarge(f"k={k} outside 1..{image.r}")
    sims = cosine_matrix(image.regions, concept_embs)  # r x w
    order = np.argsort(-sims, axis=0, kind="stable")[:k]  # k x w
    # regions picked by several concepts are counted once per concept
    i_loc = image.regions[order.ravel()].sum(axis=0) / (concept_embs.shape[0] * k)
    t_loc = concept_embs.mean(axis=0)
    return i_loc, t_loc


def local_score(image: ImageEmbedding, cls_: ClassSpec, params: AlignmentParams, k: Optional[int] = None) -> float:
    if cls_.w == 0:
        raise NoConcepts(f"class {cls_.class_id!r} has no concepts")
    k = min(params.k, image.r) if k is None else k
    i_loc, t_loc = _pooled_local(image, cls_.concept_embs, k)
    if np.linalg.norm(i_loc) < ZERO_NORM_EPS or np.linalg.norm(t_loc) < ZERO_NORM_EPS:
        raise ZeroNorm("pooled local representation vanished")
    return params.t_l * cosine(i_loc, t_loc) + params.b_l


def _argmax_low(p):
    # np.argmax already returns the first maximal index
    return int(np.argmax(p))


def fuse_predict(
    image: ImageEmbedding,
    classes: Sequence[ClassSpec],
    params: AlignmentParams,
    beta: Optional[float] = None,
    k: Optional[int] = None,
) -> Prediction:
    """Fused global/local class distribution for one image.

    Classes without concepts get zero local probability; if no class has
    concepts the local path is dropped (beta forced to 0) with a warning.
    """
    if len(classes) < 2:
        raise ValueError("zero-shot prediction needs at least two classes")
    beta = params.beta if beta is None else beta
    k = min(params.k, image.r) if k is None else k
    s_g = np.array([global_score(image, c, params) for c in classes])
    p_g = softmax(s_g)

    has = np.array([c.w > 0 for c in classes])
    s_l = np.full(len(classes), -np.inf)
    p_l = np.zeros(len(classes))
    if has.any():
        for i, c in enumerate(classes):
            if has[i]:
                s_l[i] = local_score(image, c, params, k)
        p_l[has] = softmax(s_l[has])
    elif beta != 0:
        warnings.warn("no class has concepts; using the global path only", stacklevel=2)
        beta = 0.0

    p = beta * p_l + (1.0 - beta) * p_g
    return Prediction(p_g, p_l, p, _argmax_low(p), s_g, s_l)


def predict_batch(images, classes, params, beta=None, k=None, threads: int = 1) -> List[Prediction]:
    """``fuse_predict`` over many images; output order follows ``images``."""
    fn = lambda im: fuse_predict(im, classes, params, beta, k)  # noqa: E731
    if threads <= 1:
        return [fn(im) for im in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, images))


# ------------------------------------------------------------ retrieval

def _mate_ranks(sim: np.ndarray, mates: np.ndarray) -> np.ndarray:
    """1-based rank of each row's mate column (ties go to lower index)."""
    n = sim.shape[0]
    mate_sim = sim[np.arange(n), mates][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > mate_sim) | ((sim == mate_sim) & (cols < mates[:, None]))
    return ahead.sum(axis=1) + 1


def recall_at_k(ranks, ks) -> Dict[int, float]:
    ranks = np.asarray(ranks)
    return {int(k): float(np.mean(ranks <= k)) for k in ks}


def retrieve(queries, candidates, ks=(1, 5, 10), mates=None) -> Dict[str, Dict[int, float]]:
    """Recall@k in both directions using global [CLS] cosine.

    ``mates[i]`` is the candidate index paired with query i; by default a
    query is paired with the candidate carrying the same id.
    """
    if len(queries) == 0 or len(candidates) == 0:
        raise EmptyStore("retrieval needs non-empty stores")
    if mates is None:
        pos = {c.id: j for j, c in enumerate(candidates)}
        try:
            mates = [pos[q.id] for q in queries]
        except KeyError as exc:
            raise EmptyStore(f"query id {exc.args[0]!r} has no candidate mate") from None
    mates = np.asarray(mates, dtype=int)
    Q = np.stack([q.cls for q in queries])
    C = np.stack([c.cls for c in candidates])
    sim = cosine_matrix(Q, C)
    out = {"query_to_candidate": recall_at_k(_mate_ranks(sim, mates), ks)}
    # reverse direction: only candidates that are someone's mate act as queries
    inv = {}
    for qi, cj in enumerate(mates):
        inv.setdefault(int(cj), qi)
    rev_q = np.array(sorted(inv))
    rev_m = np.array([inv[j] for j in rev_q])
    out["candidate_to_query"] = recall_at_k(_mate_ranks(sim.T[rev_q], rev_m), ks)
    return out


# ------------------------------------------------------------ annotation

def _as_class(x, name) -> ClassSpec:
    if isinstance(x, ClassSpec):
        return x
    return ClassSpec(name, x, [])


def annotate_concepts(image, concept_prompts, params: AlignmentParams, beta=None, k=None) -> np.ndarray:
    """Presence probability for each (positive, negative) prompt pair.

    Prompts may be bare TextEmbeddings (global path only) or ClassSpecs
    carrying concept vectors for the local path.
    """
    out = np.empty(len(concept_prompts))
    for i, (pos, neg) in enumerate(concept_prompts):
        pair = [_as_class(pos, "present"), _as_class(neg, "absent")]
        b = beta
        if pair[0].w == 0 and pair[1].w == 0:
            b = 0.0
        out[i] = fuse_predict(image, pair, params, beta=b, k=k).p[0]
    return out
