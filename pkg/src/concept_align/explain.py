"""Concept bottleneck models, region saliency and concept discovery."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import AlignmentParams, ImageEmbedding
from .errors import EmptySet, NonFinite, SingleClass, UnknownClass, VocabMismatch
from .numerics import cosine_matrix
from .zeroshot import _pooled_local, annotate_concepts, default_k

CBM_MAX_STEPS = 10_000
CBM_GRAD_TOL = 1e-6
DEFAULT_C = 0.316


# ------------------------------------------------------------ features

def concept_similarity_features(image: ImageEmbedding, concept_embs, mode="global", k=None) -> np.ndarray:
    """Cosine between an image and each concept vector.

    ``mode="global"`` uses the image [CLS] vector. ``mode="fused"`` averages
    that with the local cosine between the concept and its top-k pooled
    regions.
    """
    concept_embs = np.asarray(concept_embs, dtype=np.float64)
    if concept_embs.size == 0:
        return np.zeros(0)
    concept_embs = np.atleast_2d(concept_embs)
    g = cosine_matrix(image.cls[None, :], concept_embs)[0]
    if mode == "global":
        return g
    if mode != "fused":
        raise ValueError(f"unknown feature mode {mode!r}")
    k = default_k(image.r) if k is None else k
    loc = np.empty(len(concept_embs))
    for j, c in enumerate(concept_embs):
        i_loc, _ = _pooled_local(image, c[None, :], k)
        loc[j] = cosine_matrix(i_loc[None, :], c[None, :])[0, 0]
    return 0.5 * (g + loc)


# ------------------------------------------------------------ bottleneck

@dataclass
class ConceptBottleneck:
    weights: np.ndarray  # (n_concepts, n_classes)
    bias: np.ndarray  # (n_classes,)
    concept_ids: List[str]
    class_ids: List[str]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.concept_ids = [str(c) for c in self.concept_ids]
        self.class_ids = [str(c) for c in self.class_ids]
        if self.weights.shape != (len(self.concept_ids), len(self.class_ids)):
            raise VocabMismatch(
                f"weights {self.weights.shape} vs {len(self.concept_ids)} concepts x {len(self.class_ids)} classes"
            )
        if self.bias.shape != (len(self.class_ids),):
            raise VocabMismatch("bias length differs from number of classes")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NonFinite("bottleneck weights are not finite")

    def logits(self, features):
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias

    def predict_proba(self, features):
        z = self.logits(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(axis=1)

    def to_json(self) -> dict:
        return {
            "concept_ids": self.concept_ids,
            "class_ids": self.class_ids,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ConceptBottleneck":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(doc["weights"], doc["bias"], doc["concept_ids"], doc["class_ids"])


def _cbm_objective(X, Y, W, b, lam):
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = X.shape[0]
    loss = -(Y * logp).sum() / n + 0.5 * lam * (W * W).sum()
    dz = (np.exp(logp) - Y) / n
    return loss, X.T @ dz + lam * W, dz.sum(axis=0)


def train_cbm(
    features,
    labels,
    l2_inverse_strength: float = DEFAULT_C,
    concept_ids: Optional[Sequence[str]] = None,
    class_ids: Optional[Sequence[str]] = None,
    max_steps: int = CBM_MAX_STEPS,
    tol: float = CBM_GRAD_TOL,
) -> ConceptBottleneck:
    """Multinomial logistic regression on concept-similarity features.

    Minimises mean cross-entropy + ||W||^2 / (2C) (bias unpenalised) by
    full-batch gradient descent with Armijo backtracking, starting from zero.
    ``labels`` index into ``class_ids`` (default: the sorted distinct labels).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be an (n_samples, n_concepts) matrix")
    if not np.all(np.isfinite(X)):
        raise NonFinite("features contain non-finite values")
    y_raw = list(labels)
    if len(y_raw) != X.shape[0]:
        raise ValueError("features and labels differ in length")
    if class_ids is None:
        class_ids = sorted({str(v) for v in y_raw})
    class_ids = [str(c) for c in class_ids]
    pos = {c: i for i, c in enumerate(class_ids)}
    try:
        y = np.array([pos[str(v)] for v in y_raw], dtype=int)
    except KeyError as exc:
        raise UnknownClass(f"label {exc.args[0]!r} not among class ids") from None
    if np.unique(y).size < 2:
        raise SingleClass("need samples from at least two classes")
    if l2_inverse_strength <= 0:
        raise ValueError("l2_inverse_strength must be positive")
    if concept_ids is None:
        concept_ids = [f"c{j}" for j in range(X.shape[1])]

    # canonical sample order: the fit is then bit-identical under permutation
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]
    C = len(class_ids)
    Y = np.eye(C)[y]
    lam = 1.0 / l2_inverse_strength
    W = np.zeros((X.shape[1], C))
    b = np.zeros(C)
    step = 1.0
    loss, gW, gb = _cbm_objective(X, Y, W, b, lam)
    for _ in range(max_steps):
        gmax = max(np.abs(gW).max(initial=0.0), np.abs(gb).max())
        if gmax < tol:
            break
        gsq = (gW * gW).sum() + (gb * gb).sum()
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            new_loss, nW, nb = _cbm_objective(X, Y, W_new, b_new, lam)
            if new_loss <= loss - 0.5 * step * gsq or step < 1e-12:
                break
            step *= 0.5
        if not np.isfinite(new_loss):
            raise NonFinite("bottleneck training produced a non-finite loss")
        W, b, loss, gW, gb = W_new, b_new, new_loss, nW, nb
        step = min(step * 2.0, 1e3)
    return ConceptBottleneck(W, b, list(concept_ids), class_ids)


def _rank(weights, concept_ids, top_n):
    order = sorted(range(len(concept_ids)), key=lambda j: (-weights[j], concept_ids[j]))
    if top_n is not None:
        order = order[:top_n]
    return [(concept_ids[j], float(weights[j])) for j in order]


def _class_column(cbm: ConceptBottleneck, class_id) -> np.ndarray:
    try:
        return cbm.weights[:, cbm.class_ids.index(str(class_id))]
    except ValueError:
        raise UnknownClass(f"class {class_id!r} not in bottleneck") from None


def concept_class_association(cbm: ConceptBottleneck, class_id, top_n: Optional[int] = None):
    """Concepts ranked by their weight for ``class_id`` (ties by concept id)."""
    return _rank(_class_column(cbm, class_id), cbm.concept_ids, top_n)


def disease_level_inspection(cbms: Sequence[ConceptBottleneck], class_id, top_n: Optional[int] = None):
    """Rank concepts by the mean of their per-model weights for ``class_id``."""
    if not cbms:
        raise EmptySet("no bottleneck models given")
    vocab = cbms[0].concept_ids
    for m in cbms[1:]:
        if m.concept_ids != vocab:
            raise VocabMismatch("bottleneck models use different concept vocabularies")
    cols = np.stack([_class_column(m, class_id) for m in cbms])
    return _rank(cols.mean(axis=0), vocab, top_n)


# ------------------------------------------------------------ saliency

def region_saliency(image: ImageEmbedding, concept_emb, params: Optional[AlignmentParams] = None) -> np.ndarray:
    """Cosine of each region with the concept; the argmax is the focus region.

    ``params`` is accepted for interface symmetry; the scores are unscaled.
    """
    return cosine_matrix(image.regions, np.asarray(concept_emb, dtype=np.float64)[None, :])[:, 0]


# ------------------------------------------------------------ presence difference

@dataclass(frozen=True)
class ConceptDiffRow:
    cui: str
    n_pos: int
    n_neg: int
    prop_pos: float
    prop_neg: float
    D: float


@dataclass
class ConceptDiffReport:
    M: int
    N: int
    rows: List[ConceptDiffRow]

    def by_cui(self) -> Dict[str, ConceptDiffRow]:
        return {r.cui: r for r in self.rows}

    def sorted_rows(self) -> List[ConceptDiffRow]:
        return sorted(self.rows, key=lambda r: (-r.D, r.cui))

    def to_csv(self, path=None) -> str:
        lines = ["cui,n_pos,n_neg,prop_pos,prop_neg,D"]
        for r in self.sorted_rows():
            lines.append(f"{r.cui},{r.n_pos},{r.n_neg},{r.prop_pos!r},{r.prop_neg!r},{r.D!r}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text


def presence_matrix(images, concept_prompts, params, presence_threshold=0.5, beta=None, k=None, threads=1):
    """Boolean (n_images, n_concepts) matrix of annotated concept presence."""
    prompts = list(concept_prompts)
    fn = lambda im: annotate_concepts(im, prompts, params, beta=beta, k=k) >= presence_threshold  # noqa: E731
    if threads <= 1:
        rows = [fn(im) for im in images]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(fn, images))
    return np.array(rows, dtype=bool).reshape(len(rows), len(prompts))


def presence_difference(present_pos, present_neg, cuis) -> ConceptDiffReport:
    """D = N_pos/M - N_neg/N from boolean presence matrices."""
    present_pos = np.asarray(present_pos, dtype=bool)
    present_neg = np.asarray(present_neg, dtype=bool)
    M, N = present_pos.shape[0], present_neg.shape[0]
    if M < 1 or N < 1:
        raise EmptySet("both image sets must be non-empty")
    rows = []
    for j, cui in enumerate(cuis):
        npos = int(present_pos[:, j].sum())
        nneg = int(present_neg[:, j].sum())
        rows.append(ConceptDiffRow(str(cui), npos, nneg, npos / M, nneg / N, npos / M - nneg / N))
    return ConceptDiffReport(M, N, rows)


def concept_presence_difference(
    pos_images,
    neg_images,
    concept_prompts,
    params: AlignmentParams,
    presence_threshold: float = 0.5,
    beta=None,
    k=None,
    threads: int = 1,
) -> ConceptDiffReport:
    """Compare how often each concept is annotated present in two image sets.

    ``concept_prompts`` maps cui -> (positive prompt, negative prompt).
    """
    if len(pos_images) == 0 or len(neg_images) == 0:
        raise EmptySet("both image sets must be non-empty")
    cuis = list(concept_prompts)
    prompts = [concept_prompts[c] for c in cuis]
    kw = dict(presence_threshold=presence_threshold, beta=beta, k=k, threads=threads)
    pp = presence_matrix(pos_images, prompts, params, **kw)
    pn = presence_matrix(neg_images, prompts, params, **kw)
    return presence_difference(pp, pn, cuis)
