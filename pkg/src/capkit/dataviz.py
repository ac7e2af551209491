"""PCA (power iteration with deflation) and k-means (careful seeding + Lloyd)."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numcore import make_rng

log = logging.getLogger(__name__)

PCA_TOL = 1e-10
PCA_MAX_ITERS = 1000


class DegenerateData(ValueError):
    pass


@dataclass
class PcaResult:
    components: np.ndarray  # (k, D), rows orthonormal
    explained_variance: np.ndarray  # (k,), descending
    projected: np.ndarray  # (N, k)
    mean: np.ndarray
    total_variance: float


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)
    reseeded: int = 0


def _orthogonalise(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    # Two Gram-Schmidt passes keep round-off from leaking back into the basis.
    for _ in range(2):
        for u in basis:
            v = v - (u @ v) * u
    return v


def _power_iteration(
    cov: np.ndarray, rng: np.random.Generator, basis: list[np.ndarray]
) -> tuple[np.ndarray, float]:
    """Dominant eigenpair of ``cov`` restricted to the complement of ``basis``."""
    v = _orthogonalise(rng.standard_normal(cov.shape[0]), basis)
    v /= np.linalg.norm(v)
    scale = max(float(np.abs(cov).max()), 1e-300)
    for _ in range(PCA_MAX_ITERS):
        w = _orthogonalise(cov @ v, basis)
        norm = np.linalg.norm(w)
        if norm <= 1e-13 * scale:
            # Nothing left in the complement: any unit vector there is an eigenvector of 0.
            return v, 0.0
        w /= norm
        # Sign-insensitive convergence: compare directions up to a flip.
        delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        v = w
        if delta < PCA_TOL:
            break
    return v, float(v @ cov @ v)


def pca(data, k: int, seed: int = 0) -> PcaResult:
    """Top-k principal components of the mean-centred data.

    Each component is found by power iteration on the covariance matrix and
    then deflated out. Eigenvalues that are numerically equal may converge to
    any orthonormal basis of their eigenspace.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca needs an N x D matrix with N >= 2")
    N, D = X.shape
    if not 1 <= k <= min(N, D):
        raise ValueError(f"k must be in [1, {min(N, D)}], got {k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (N - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateData("data has zero variance in every direction")

    rng = make_rng(seed)
    comps, variances = [], []
    work = cov.copy()
    for _ in range(k):
        v, _ = _power_iteration(work, rng, comps)
        v = _orthogonalise(v, comps)
        v /= np.linalg.norm(v)
        lam = max(float(v @ cov @ v), 0.0)
        # Deterministic sign: largest-magnitude entry positive.
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        variances.append(lam)
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    return PcaResult(components, np.array(variances), Xc @ components.T, mean, total)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def careful_seeding(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++: each new centre is drawn with probability proportional to D(x)^2."""
    N = X.shape[0]
    centres = [X[rng.integers(N)]]
    d2 = ((X - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(N))
        else:
            idx = int(rng.choice(N, p=d2 / total))
        centres.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centres, dtype=np.float64)


def _lloyd(X: np.ndarray, k: int, rng: np.random.Generator, max_iters: int) -> KMeansResult:
    N = X.shape[0]
    C = careful_seeding(X, k, rng)
    d2 = _sq_dists(X, C)
    assign = d2.argmin(axis=1)
    history = [float(d2[np.arange(N), assign].sum())]
    reseeded = 0
    iterations = 0
    for iterations in range(1, max_iters + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                far = int(d2[np.arange(N), assign].argmax())
                log.info("k-means: cluster %d emptied; re-seeding at point %d", j, far)
                C[j] = X[far]
                reseeded += 1
        d2 = _sq_dists(X, C)
        new_assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(N), new_assign].sum())
        assert inertia <= history[-1] + 1e-9 * max(1.0, history[-1]), "Lloyd step increased inertia"
        history.append(inertia)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(C, assign, history[-1], iterations, history, reseeded)


def kmeans(data, k: int = 20, seed: int = 0, max_iters: int = 100, n_init: int = 10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding until assignments stop changing.

    ``n_init`` independent seedings are drawn from one seeded stream and the
    lowest-inertia run is kept (the first one on ties). An emptied cluster is
    re-seeded at the point farthest from its centroid.
    """
    X = np.asarray(data, dtype=np.float64)
    N = X.shape[0]
    if k < 1 or N < k:
        raise ValueError(f"kmeans needs 1 <= k <= N (k={k}, N={N})")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = make_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(X, k, rng, max_iters)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def projection_csv(image_ids: Sequence[str], coords: np.ndarray, clusters=None) -> str:
    """``image_id,x,y[,cluster]`` for 2-D output; ``pc1..pck`` columns otherwise."""
    k = coords.shape[1]
    cols = ["x", "y"][:k] if k <= 2 else [f"pc{i + 1}" for i in range(k)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id"] + cols + (["cluster"] if clusters is not None else []))
    for n, image_id in enumerate(image_ids):
        row = [image_id] + [repr(float(v)) for v in coords[n]]
        if clusters is not None:
            row.append(int(clusters[n]))
        w.writerow(row)
    return buf.getvalue()
