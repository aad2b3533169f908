"""Small float64 primitives shared by every other module.

Vectors are plain 1-D numpy arrays and matrices 2-D arrays. Inputs of any
float dtype are promoted to float64 before arithmetic.
"""
import numpy as np

from .errors import DimMismatch, EmptyInput, ZeroNorm

ZERO_NORM_EPS = 1e-12


def as_vec(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimMismatch(f"expected a non-empty vector, got shape {v.shape}")
    return v


def l2_normalize(v):
    """Scale ``v`` to unit Euclidean norm.

    Raises ZeroNorm when the norm is below 1e-12.
    """
    v = as_vec(v)
    n = np.linalg.norm(v)
    if n < ZERO_NORM_EPS:
        raise ZeroNorm("cannot normalise a vector with norm < 1e-12")
    return v / n


def normalize_rows(m):
    """Row-wise l2 normalisation of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm("matrix has a row with norm < 1e-12")
    return m / norms


def cosine(u, v):
    u = as_vec(u)
    v = as_vec(v)
    if u.shape != v.shape:
        raise DimMismatch(f"dimension mismatch: {u.size} vs {v.size}")
    c = float(np.dot(l2_normalize(u), l2_normalize(v)))
    return min(1.0, max(-1.0, c))


def cosine_matrix(a, b):
    """Pairwise cosines between the rows of ``a`` and the rows of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


def log_sigmoid(x):
    """log(1 / (1 + exp(-x))), evaluated without overflow.

    Accepts scalars or arrays; returns the same kind.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    neg = ~pos
    out[neg] = x[neg] - np.log1p(np.exp(x[neg]))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def softmax(xs):
    xs = as_vec(xs)
    e = np.exp(xs - xs.max())
    return e / e.sum()


def mean_pool(rows):
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyInput("mean_pool needs at least one row")
    return rows.mean(axis=0)
