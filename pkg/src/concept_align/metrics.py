"""AUC, accuracy, percentile bootstrap intervals and the paired t-test."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr
from scipy.stats import rankdata

from .errors import DegenerateData, LengthMismatch, SingleClass, TooFewItems, ZeroVariance

MAX_REDRAWS = 100


def _binary_auc(scores, labels):
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative items")
    ranks = rankdata(scores)  # ties share their average rank
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties.

    1-D ``scores`` with 0/1 labels give the binary AUC. An (n, C) score
    matrix with class-index labels gives the macro mean of one-vs-rest AUCs
    over the classes that occur in ``labels``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.ndim != 1 or scores.shape[0] != labels.size or labels.size == 0:
        raise LengthMismatch("scores and labels must be non-empty and equally long")
    if scores.ndim == 1:
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("binary AUC expects 0/1 labels")
        return _binary_auc(scores, labels.astype(int))
    present = np.unique(labels)
    if present.size < 2:
        raise SingleClass("AUC needs at least two classes")
    per_class = [_binary_auc(scores[:, int(c)], (labels == c).astype(int)) for c in present]
    return float(np.mean(per_class))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise LengthMismatch(f"{predictions.size} predictions vs {labels.size} labels")
    return float(np.count_nonzero(predictions == labels) / labels.size)


@dataclass
class BootstrapCI:
    lo: float
    hi: float
    n_resamples: int
    n_skipped: int

    def __iter__(self):
        return iter((self.lo, self.hi))


def _resample_value(metric, arrays, n, seed, b):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    for _ in range(MAX_REDRAWS):
        idx = rng.integers(0, n, size=n)
        try:
            return metric(*(a[idx] for a in arrays))
        except (SingleClass, ZeroVariance):
            continue
    return None


def bootstrap_ci(metric, data, n_resamples: int = 1000, seed: int = 0, level: float = 0.95, threads: int = 1) -> BootstrapCI:
    """Percentile bootstrap interval for ``metric(*data)``.

    ``data`` is a tuple of equally long arrays resampled jointly by item.
    Resample ``b`` draws from its own generator keyed on (seed, b), so the
    interval does not depend on ``threads``. Resamples on which the metric
    is undefined (a single label class) are redrawn up to 100 times and
    then skipped.
    """
    if n_resamples < 100:
        raise DegenerateData("need at least 100 resamples")
    if not isinstance(data, (tuple, list)):
        data = (data,)
    arrays = [np.asarray(a) for a in data]
    n = arrays[0].shape[0] if arrays else 0
    if n == 0 or any(a.shape[0] != n for a in arrays):
        raise DegenerateData("bootstrap data must be non-empty and equally long")
    fn = lambda b: _resample_value(metric, arrays, n, seed, b)  # noqa: E731
    if threads <= 1:
        vals = [fn(b) for b in range(n_resamples)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(fn, range(n_resamples)))
    kept = np.array([v for v in vals if v is not None], dtype=np.float64)
    if kept.size == 0:
        raise DegenerateData("metric undefined on every resample")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(kept, [tail, 100.0 - tail])
    return BootstrapCI(float(lo), float(hi), n_resamples, n_resamples - kept.size)


def paired_ttest(a, b):
    """Two-sided paired t-test; returns (t, p) with n - 1 degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch("paired series differ in length")
    n = a.size
    if n < 2:
        raise TooFewItems("paired t-test needs at least two items")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ZeroVariance("differences have zero variance")
    t = d.mean() / (sd / np.sqrt(n))
    p = 2.0 * stdtr(n - 1, -abs(t))
    return float(t), float(min(1.0, p))
