"""Phoneme and viseme prototype banks.

A bank holds K centroids in feature space. Features get a discrete code from
the nearest centroid and a soft code from a temperature-scaled softmax over
negative squared distances; only the soft path carries gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import diffcore as dc

log = logging.getLogger(__name__)

MODALITIES = ("phoneme", "viseme")


@dataclass
class PrototypeBank:
    centroids: np.ndarray
    modality: str = "phoneme"
    tau: float = 1.0
    last_refit_epoch: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError(f"need a K x d centroid matrix with K >= 2, got {self.centroids.shape}")
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def min_separation(self) -> float:
        d2 = _sq_dists(self.centroids, self.centroids)
        np.fill_diagonal(d2, np.inf)
        return float(np.sqrt(d2.min()))

    def save(self, path) -> None:
        path = Path(path)
        header = {"K": self.K, "d": self.dim, "tau": self.tau, "modality": self.modality,
                  "last_refit_epoch": self.last_refit_epoch}
        path.with_suffix(".json").write_text(json.dumps(header))
        self.centroids.astype("<f8").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path) -> "PrototypeBank":
        path = Path(path)
        h = json.loads(path.with_suffix(".json").read_text())
        c = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(h["K"], h["d"])
        return cls(c, h["modality"], h["tau"], h.get("last_refit_epoch", 0))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # exact differences rather than the |x|^2 - 2xc + |c|^2 expansion: ties must stay ties
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _wcss(x, centroids, labels) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def lloyd(features: np.ndarray, centroids: np.ndarray, max_iter: int = 100, tol: float = 1e-6,
          history: list | None = None) -> np.ndarray:
    """Lloyd iterations from ``centroids`` until the largest shift is below ``tol``.

    An emptied cluster is re-seeded at the point farthest from its assigned
    centroid. ``history`` (if given) receives the WCSS after every
    assignment step.
    """
    x = np.asarray(features, dtype=np.float64)
    c = np.array(centroids, dtype=np.float64)
    K = c.shape[0]
    for _ in range(max_iter):
        d2 = _sq_dists(x, c)
        labels = d2.argmin(axis=1)
        if history is not None:
            history.append(_wcss(x, c, labels))
        new = c.copy()
        counts = np.bincount(labels, minlength=K)
        for k in range(K):
            if counts[k]:
                new[k] = x[labels == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            own = d2[np.arange(len(x)), labels]
            far = int(own.argmax())
            new[k] = x[far]
            labels[far] = k
            d2[far] = 0.0
        shift = np.sqrt(((new - c) ** 2).sum(axis=1)).max()
        c = new
        if shift < tol:
            break
    return c


def _seed_centers(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than K; fall back to any unused point
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _check_features(x: np.ndarray, K: int) -> None:
    if x.ndim != 2:
        raise ValueError("features must be an N x d matrix")
    if len(x) < K:
        raise ValueError(f"need at least K={K} features, got {len(x)}")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")


def wcss(features, centroids) -> float:
    """Within-cluster sum of squares under nearest-centroid assignment."""
    x = np.asarray(features, dtype=np.float64)
    return float(_sq_dists(x, np.asarray(centroids)).min(axis=1).sum())


def kmeans_restarts(x: np.ndarray, K: int, rng: np.random.Generator, n_init: int,
                    max_iter: int = 100) -> np.ndarray:
    """Best (lowest WCSS) of ``n_init`` K-means++ seeded Lloyd runs; earliest wins ties."""
    best, best_w = None, np.inf
    for _ in range(n_init):
        c = lloyd(x, _seed_centers(x, K, rng), max_iter=max_iter)
        w = wcss(x, c)
        if w < best_w:
            best, best_w = c, w
    return best


def kmeanspp_init(features, K: int, seed: int, modality: str = "phoneme", tau: float = 1.0,
                  max_iter: int = 100, n_init: int = 1) -> PrototypeBank:
    """K-means++ seeding followed by Lloyd refinement, keeping the best of ``n_init`` runs."""
    x = np.asarray(features, dtype=np.float64)
    _check_features(x, K)
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    c = kmeans_restarts(x, K, np.random.default_rng(seed), n_init, max_iter)
    return PrototypeBank(c, modality, tau, 0)


def match_to(reference: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Reorder ``centroids`` so that row k is the one closest to ``reference[k]`` (one-to-one)."""
    rows, cols = linear_sum_assignment(_sq_dists(reference, centroids))
    out = np.empty_like(centroids)
    out[rows] = centroids[cols]
    return out


def hard_assign(z, bank: PrototypeBank):
    """Index of the nearest centroid (lowest index on ties). Accepts a vector or N x d."""
    z = np.asarray(dc.const(z))
    if not np.isfinite(z).all():
        raise ValueError("non-finite feature")
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[1] != bank.dim:
        raise ValueError(f"feature width {z2.shape[1]} != bank width {bank.dim}")
    codes = _sq_dists(z2, bank.centroids).argmin(axis=1)
    return int(codes[0]) if single else codes


def soft_assign(z, bank: PrototypeBank, tau: float | None = None, centroids=None):
    """softmax_k(-||z - c_k||^2 / tau^2); differentiable in ``z`` and ``centroids``.

    ``centroids`` overrides the bank's (e.g. a tape leaf for gradient checks).
    """
    tau = bank.tau if tau is None else tau
    if not tau > 0:
        raise ValueError("tau must be positive")
    c = bank.centroids if centroids is None else centroids
    single = dc.const(z).ndim == 1
    z2 = dc.reshape(z, (1, -1)) if single else z
    n, d = dc.const(z2).shape
    if d != bank.dim:
        raise ValueError(f"feature width {d} != bank width {bank.dim}")
    diff = dc.sub(dc.reshape(z2, (n, 1, d)), dc.reshape(c, (1, bank.K, d)))
    d2 = dc.sum_(dc.square(diff), axis=2)
    v = dc.softmax(d2 * (-1.0 / tau**2), axis=1)
    return dc.reshape(v, (bank.K,)) if single else v


def refit(bank: PrototypeBank, features, current_epoch: int, max_iter: int = 100,
          restarts: int = 0, seed: int = 0) -> PrototypeBank:
    """Lloyd iterations warm-started from the current centroids.

    With ``restarts`` > 0, fresh K-means++ runs compete with the warm start;
    one replaces it only if its WCSS is strictly lower, and its centroids are
    then reordered to follow the old ones so codes keep their identity.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        log.warning("refit called with no features; bank left unchanged")
        return bank
    c = lloyd(x, bank.centroids, max_iter=max_iter)
    if restarts > 0:
        _check_features(x, bank.K)
        fresh = kmeans_restarts(x, bank.K, np.random.default_rng(seed), restarts, max_iter)
        if wcss(x, fresh) < wcss(x, c) * (1.0 - 1e-9):
            c = match_to(bank.centroids, fresh)
    return PrototypeBank(c, bank.modality, bank.tau, current_epoch)


def due_for_refit(bank: PrototypeBank, current_epoch: int, period: int) -> bool:
    return current_epoch - bank.last_refit_epoch >= period
