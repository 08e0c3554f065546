"""Linear algebra and statistics primitives shared by the other modules.

Everything here is a pure function of its inputs.  Randomness is always
passed in explicitly as a :class:`numpy.random.Generator`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidRank, SingleCluster, SingularSystem, TooFewPoints

RANK_TOL = 1e-10


# ---------------------------------------------------------------- rng

def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    PCG64 streams and numpy's normal/uniform samplers are platform
    independent, so a seed plus a call order fixes every output.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent child stream identified by ``(seed, *keys)``."""
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------- least squares

def solve_least_squares(design, targets, ridge: float = 0.0) -> np.ndarray:
    """Minimise ``||targets - design @ w||^2 + ridge * ||w||^2``.

    ``targets`` may be a vector or a matrix with one column per response.
    With ``ridge == 0`` the normal matrix must be well conditioned: the
    ratio of its smallest to largest eigenvalue has to exceed 1e-10,
    otherwise :class:`SingularSystem` is raised.
    """
    A = np.asarray(design, dtype=float)
    y = np.asarray(targets, dtype=float)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ValueError("design must be a non-empty 2-D array")
    if y.shape[0] != A.shape[0]:
        raise ValueError("targets and design disagree on the number of rows")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if ridge == 0:
        # eigenvalues of A^T A are s**2; p > n is always rank deficient
        if A.shape[1] > A.shape[0] or s[-1] ** 2 <= RANK_TOL * s[0] ** 2:
            raise SingularSystem("normal matrix is rank deficient")
        filt = 1.0 / s
    else:
        filt = s / (s**2 + ridge)
    coef = U.T @ y
    coef = coef * (filt if y.ndim == 1 else filt[:, None])
    return Vt.T @ coef


# ---------------------------------------------------------------- pca

@dataclass(frozen=True)
class PCAFit:
    projection: np.ndarray  # p x k, orthonormal columns
    means: np.ndarray  # p
    explained_variance: np.ndarray  # k, non-increasing


def pca_fit(data, k: int) -> PCAFit:
    """Principal directions from the eigendecomposition of the sample covariance."""
    X = np.asarray(data, dtype=float)
    n, p = X.shape
    if not 1 <= k <= min(n, p):
        raise InvalidRank(f"k={k} outside [1, {min(n, p)}]")
    means = X.mean(axis=0)
    Xc = X - means
    cov = Xc.T @ Xc / max(n - 1, 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:k]
    vals = np.clip(evals[order], 0.0, None)
    vecs = evecs[:, order]
    # sign convention: largest-magnitude entry of each direction is positive
    lead = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[lead, np.arange(k)])
    signs[signs == 0] = 1.0
    return PCAFit(vecs * signs, means, vals)


# ---------------------------------------------------------------- k-means

@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray  # int cluster index per point
    centroids: np.ndarray  # one value per cluster, ascending
    inertia: float


def _inertia(x, labels, k):
    cent = np.array([x[labels == c].mean() for c in range(k)])
    return float(((x - cent[labels]) ** 2).sum()), cent


def _kmeanspp_seed(x, k, rng):
    m = x.shape[0]
    centers = [x[rng.integers(m)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(m)])
        else:
            centers.append(x[rng.choice(m, p=d2 / total)])
    return np.array(centers, dtype=float)


def _lloyd(x, centers, max_iter=100):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        new = np.argmin((x[:, None] - centers[None, :]) ** 2, axis=1)
        # keep every cluster populated: move the worst-fit point into empties
        for c in range(k):
            if not np.any(new == c):
                resid = (x - centers[new]) ** 2
                counts = np.bincount(new, minlength=k)
                resid[counts[new] <= 1] = -1.0
                j = int(np.argmax(resid))
                new[j] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == c].mean() for c in range(k)])
    return labels


def _contiguous_dp(x, k):
    """Exact 1-D k-means by dynamic programming over the sorted points."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    m = xs.shape[0]
    c1 = np.concatenate([[0.0], np.cumsum(xs)])
    c2 = np.concatenate([[0.0], np.cumsum(xs**2)])

    def cost(i, j):  # points i..j-1
        s = c1[j] - c1[i]
        return max(c2[j] - c2[i] - s * s / (j - i), 0.0)

    inf = np.inf
    D = np.full((k + 1, m + 1), inf)
    arg = np.zeros((k + 1, m + 1), dtype=int)
    D[0, 0] = 0.0
    for c in range(1, k + 1):
        for j in range(c, m + 1):
            best, where = inf, c - 1
            for i in range(c - 1, j):
                v = D[c - 1, i] + cost(i, j)
                if v < best:
                    best, where = v, i
            D[c, j], arg[c, j] = best, where
    labels_sorted = np.empty(m, dtype=int)
    j = m
    for c in range(k, 0, -1):
        i = arg[c, j]
        labels_sorted[i:j] = c - 1
        j = i
    labels = np.empty(m, dtype=int)
    labels[order] = labels_sorted
    return labels


def kmeans_1d(points: Sequence[float], k: int, rng: np.random.Generator,
              n_restarts: int = 5, max_iter: int = 100) -> KMeansResult:
    """Cluster real values into ``k`` groups.

    Lloyd's algorithm from k-means++ seeds, ``n_restarts`` times, keeping the
    lowest inertia.  One extra candidate comes from the exact contiguous
    dynamic program, so the returned inertia is always the global optimum.
    Clusters are relabelled so that centroids are ascending.
    """
    x = np.asarray(points, dtype=float).ravel()
    if k < 1:
        raise ValueError("k must be positive")
    if x.shape[0] < k:
        raise TooFewPoints(f"{x.shape[0]} points for k={k}")
    candidates = []
    for _ in range(n_restarts):
        candidates.append(_lloyd(x, _kmeanspp_seed(x, k, rng), max_iter))
    candidates.append(_contiguous_dp(x, k))
    best_labels, best_inertia, best_cent = None, np.inf, None
    for labels in candidates:
        inertia, cent = _inertia(x, labels, k)
        if inertia < best_inertia:
            best_labels, best_inertia, best_cent = labels, inertia, cent
    order = np.argsort(best_cent, kind="stable")
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    return KMeansResult(relabel[best_labels], best_cent[order], best_inertia)


# ---------------------------------------------------------------- silhouette

def silhouette_mean(points, assignments) -> float:
    """Mean silhouette coefficient; singleton clusters contribute 0."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    lab = np.asarray(assignments)
    clusters = np.unique(lab)
    if clusters.shape[0] < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    s = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = lab == lab[i]
        n_own = own.sum()
        if n_own == 1:
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, lab == c].mean() for c in clusters if c != lab[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())
