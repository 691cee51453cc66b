"""Embedding-space anomaly detectors and the composite similarity score.

Every detector standardizes with statistics of the ID training set and
returns scores where larger means more anomalous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.ensemble import IsolationForest
from sklearn.neighbors import LocalOutlierFactor

from trajood.detector import EvalReport, bootstrap_scores, calibrate_threshold
from trajood.errors import ValidationError

log = logging.getLogger(__name__)

DETECTORS = ("mah", "knn", "lof", "iforest", "ocsvm")


class Standardizer:
    def __init__(self, X: np.ndarray):
        X = _check_matrix(X)
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def _check_matrix(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not np.all(np.isfinite(X)):
        raise ValidationError("embeddings must be finite")
    return X


def _check_train(X) -> np.ndarray:
    X = _check_matrix(X)
    if len(X) < 2 or np.all(np.ptp(X, axis=0) == 0):
        raise ValidationError("degenerate training set (all rows identical)")
    return X


def mahalanobis_score(x, mu, cov) -> np.ndarray:
    """sqrt((x - mu)^T cov^-1 (x - mu)) for each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    L = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    z = np.linalg.solve(L, (x - np.asarray(mu)).T)
    return np.sqrt(np.sum(z * z, axis=0))


def regularized_covariance(X: np.ndarray, lam: float = 1e-6) -> tuple[np.ndarray, float]:
    """Cov + lam I, raising lam by decades until Cholesky succeeds."""
    C = np.atleast_2d(np.cov(X, rowvar=False))
    for _ in range(20):
        R = C + lam * np.eye(len(C))
        try:
            np.linalg.cholesky(R)
            return R, lam
        except np.linalg.LinAlgError:
            log.info("covariance not positive definite at lambda=%g; raising", lam)
            lam *= 10
    raise ValidationError("could not regularize covariance")


def knn_score(x, train_points, k: int = 10) -> np.ndarray:
    """Mean Euclidean distance to the k nearest training points."""
    train_points = np.atleast_2d(np.asarray(train_points, dtype=np.float64))
    if k < 1 or k > len(train_points):
        raise ValidationError(f"k={k} must lie in [1, {len(train_points)}]")
    d, _ = cKDTree(train_points).query(np.atleast_2d(x), k=k)
    return np.asarray(d, dtype=np.float64).reshape(len(np.atleast_2d(x)), k).mean(axis=1)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    d2 = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2 * A @ B.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


class OneClassSVM:
    """nu one-class SVM with an RBF kernel solved by pairwise (SMO) updates.

    Dual: min 1/2 a^T K a  s.t.  0 <= a_i <= 1/(nu N), sum a = 1.
    The decision function sum_i a_i k(x_i, x) - rho is positive for inliers.
    """

    def __init__(self, nu: float = 0.1, gamma: float | None = None, tol: float = 1e-6, max_iter: int = 100000):
        if not 0 < nu <= 1:
            raise ValidationError("nu must lie in (0, 1]")
        self.nu, self.gamma, self.tol, self.max_iter = nu, gamma, tol, max_iter

    def fit(self, X: np.ndarray) -> "OneClassSVM":
        X = _check_train(X)
        N = len(X)
        gamma = self.gamma if self.gamma is not None else 1.0 / X.shape[1]
        K = rbf_kernel(X, X, gamma)
        C = 1.0 / (self.nu * N)
        a = np.zeros(N)
        full = int(np.floor(self.nu * N))
        a[:full] = C
        if full < N:
            a[full] = 1.0 - full * C
        G = K @ a
        it = 0
        for it in range(self.max_iter):
            up = a < C - 1e-12
            down = a > 1e-12
            i = int(np.argmin(np.where(up, G, np.inf)))
            j = int(np.argmax(np.where(down, G, -np.inf)))
            gap = G[j] - G[i]
            if gap < self.tol:
                break
            curv = max(K[i, i] + K[j, j] - 2 * K[i, j], 1e-12)
            t = min(gap / curv, C - a[i], a[j])
            a[i] += t
            a[j] -= t
            G += t * (K[:, i] - K[:, j])
        else:
            log.warning("one-class SVM stopped at max_iter=%d", self.max_iter)
        free = (a > 1e-12) & (a < C - 1e-12)
        if free.any():
            rho = float(G[free].mean())
        else:
            rho = 0.5 * (float(G[a < C - 1e-12].min(initial=np.inf)) + float(G[a > 1e-12].max(initial=-np.inf)))
        sv = a > 1e-12
        self.support_, self.alpha_, self.rho_, self.gamma_ = X[sv], a[sv], rho, gamma
        self.n_iter_ = it + 1
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return rbf_kernel(np.atleast_2d(X), self.support_, self.gamma_) @ self.alpha_ - self.rho_


@dataclass
class EmbeddingDetector:
    """One detector type fitted on standardized ID training embeddings."""

    kind: str
    k_knn: int = 10
    k_lof: int = 20
    n_trees: int = 100
    max_samples: int = 256
    nu: float = 0.1
    lam: float = 1e-6
    seed: int = 0

    def fit(self, X_id: np.ndarray) -> "EmbeddingDetector":
        if self.kind not in DETECTORS:
            raise ValidationError(f"unknown detector {self.kind!r}; choose from {DETECTORS}")
        X = _check_train(X_id)
        self.std_ = Standardizer(X)
        Z = self.std_(X)
        if self.kind == "mah":
            self.mu_ = Z.mean(axis=0)
            self.cov_, self.lam_ = regularized_covariance(Z, self.lam)
        elif self.kind == "knn":
            self.train_ = Z
        elif self.kind == "lof":
            self.model_ = LocalOutlierFactor(n_neighbors=min(self.k_lof, len(Z) - 1), novelty=True).fit(Z)
        elif self.kind == "iforest":
            self.model_ = IsolationForest(n_estimators=self.n_trees, max_samples=min(self.max_samples, len(Z)),
                                          random_state=self.seed).fit(Z)
        else:
            self.model_ = OneClassSVM(nu=self.nu).fit(Z)
        return self

    def score(self, X: np.ndarray) -> np.ndarray:
        Z = self.std_(_check_matrix(X))
        if self.kind == "mah":
            return mahalanobis_score(Z, self.mu_, self.cov_)
        if self.kind == "knn":
            return knn_score(Z, self.train_, min(self.k_knn, len(self.train_)))
        if self.kind == "lof":
            return -self.model_.score_samples(Z)
        if self.kind == "iforest":
            return -self.model_.score_samples(Z)
        return -self.model_.decision_function(Z)


def baseline_suite(id_train, id_val, ood_val, id_test, ood_test, detectors=DETECTORS, B: int = 100,
                   seed: int = 0) -> dict:
    """Fit each detector on ID train, calibrate tau on validation, bootstrap on test.

    Returns {name: EvalReport} plus the name of the AUROC-best detector under "best".
    """
    reports: dict = {}
    y_val = np.r_[np.zeros(len(id_val)), np.ones(len(ood_val))]
    for name in detectors:
        det = EmbeddingDetector(name, seed=seed).fit(id_train)
        tau = calibrate_threshold(np.r_[det.score(id_val), det.score(ood_val)], y_val)
        reports[name] = bootstrap_scores(det.score(id_test), det.score(ood_test), tau, B, seed=seed)
    reports["best"] = max(detectors, key=lambda n: reports[n].mean("auroc"))
    return reports


def composite_similarity(tanimoto: float, tm: float, rmsd: float) -> float:
    """max(tanimoto + tm + (1 - rmsd), 0), in [0, 3]."""
    if not (0 <= tanimoto <= 1 and 0 <= tm <= 1):
        raise ValidationError("tanimoto and TM-score must lie in [0, 1]")
    if rmsd < 0:
        raise ValidationError("rmsd must be non-negative")
    return max(tanimoto + tm + (1.0 - rmsd), 0.0)


__all__ = ["DETECTORS", "EmbeddingDetector", "EvalReport", "OneClassSVM", "Standardizer", "baseline_suite",
           "composite_similarity", "knn_score", "mahalanobis_score", "regularized_covariance", "rbf_kernel"]
