"""Density-ratio OOD detector over trajectory features.

Features are mapped to normal scores through their ID empirical CDF,
standardised, and projected onto the leading principal directions of the ID
data. Two isotropic Gaussian KDEs (ID and OOD) are fitted in that space and
the detector scores a point by the negated log-density ratio.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, ndtri

from trajood.errors import ValidationError
from trajood.metrics import Confusion, auroc

log = logging.getLogger(__name__)

RISK_CUTOFFS = (0.90, 0.99)
RISK_LEVELS = ("Low", "Medium", "High")


@dataclass
class Preprocessor:
    """T = projection o standardisation o quantile-to-normal, all fitted on ID data."""

    sorted_train: np.ndarray  # [N, F] per-column sorted ID values
    mean: np.ndarray
    std: np.ndarray
    basis: np.ndarray  # [F, m_pc]
    constant: np.ndarray  # [F] bool

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def quantile(self, X: np.ndarray) -> np.ndarray:
        """Mid-rank empirical CDF mapped through the standard normal inverse CDF.

        With N training values the CDF of a point is
        (#below + 0.5 * #equal + 0.5) / (N + 1), which stays strictly inside
        (0, 1) and clips unseen extremes to the training range.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        N, F = self.sorted_train.shape
        if X.shape[1] != F:
            raise ValidationError(f"expected {F} features, got {X.shape[1]}")
        U = np.empty_like(X)
        for j in range(F):
            col = self.sorted_train[:, j]
            lo = np.searchsorted(col, X[:, j], side="left")
            hi = np.searchsorted(col, X[:, j], side="right")
            U[:, j] = (lo + 0.5 * (hi - lo) + 0.5) / (N + 1)
        Q = ndtri(U)
        Q[:, self.constant] = 0.0
        return Q

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (self.quantile(X) - self.mean) / self.std

    def transform(self, X: np.ndarray) -> np.ndarray:
        return self.standardize(X) @ self.basis


def fit_preprocessor(X_id: np.ndarray, n_components: int = 15) -> Preprocessor:
    X_id = np.asarray(X_id, dtype=np.float64)
    N, F = X_id.shape
    if N <= n_components:
        raise ValidationError(f"need more ID rows ({N}) than principal components ({n_components})")
    if n_components > F or n_components < 1:
        raise ValidationError(f"n_components must lie in [1, {F}]")
    constant = np.ptp(X_id, axis=0) == 0
    if constant.any():
        log.warning("constant feature columns mapped to 0: %s", np.flatnonzero(constant).tolist())
    pre = Preprocessor(np.sort(X_id, axis=0), np.zeros(F), np.ones(F), np.eye(F)[:, :n_components], constant)
    Q = pre.quantile(X_id)
    pre.mean = Q.mean(axis=0)
    std = Q.std(axis=0)
    pre.std = np.where(std > 0, std, 1.0)
    Z = (Q - pre.mean) / pre.std
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    basis = vt[:n_components].T
    # deterministic sign: largest-magnitude loading of each component is positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(n_components)])
    pre.basis = basis * np.where(flip == 0, 1.0, flip)
    return pre


@dataclass
class KDE:
    points: np.ndarray
    bandwidth: float

    def log_density(self, Z: np.ndarray) -> np.ndarray:
        return kde_log_density(np.atleast_2d(Z), self.points, self.bandwidth)


def kde_log_density(Z: np.ndarray, points: np.ndarray, h: float) -> np.ndarray:
    """log of (1/N) sum_i N(z; z_i, h^2 I)."""
    Z = np.asarray(Z, dtype=np.float64)
    N, m = points.shape
    d2 = (np.sum(Z**2, axis=1)[:, None] + np.sum(points**2, axis=1)[None, :] - 2.0 * Z @ points.T)
    d2 = np.maximum(d2, 0.0)
    return logsumexp(-d2 / (2 * h * h), axis=1) - np.log(N) - 0.5 * m * np.log(2 * np.pi * h * h)


def silverman_bandwidth(Z: np.ndarray) -> float:
    N, m = Z.shape
    s = float(np.mean(Z.std(axis=0, ddof=1))) if N > 1 else 1.0
    s = s if s > 0 else 1.0
    return (4.0 / (m + 2)) ** (1.0 / (m + 4)) * N ** (-1.0 / (m + 4)) * s


def fit_kde(Z: np.ndarray, folds: int = 5, grid=None, seed: int = 0) -> KDE:
    """Bandwidth by K-fold held-out log-likelihood over 20 log-spaced multiples of Silverman's rule."""
    Z = np.asarray(Z, dtype=np.float64)
    N = Z.shape[0]
    if folds < 2 or N < folds:
        raise ValidationError(f"KDE needs N >= folds >= 2 (N={N}, folds={folds})")
    base = silverman_bandwidth(Z)
    grid = base * (np.geomspace(0.05, 5.0, 20) if grid is None else np.asarray(grid))
    assign = np.random.default_rng(seed).permutation(N) % folds
    scores = np.zeros(len(grid))
    for k in range(folds):
        tr, te = Z[assign != k], Z[assign == k]
        for i, h in enumerate(grid):
            scores[i] += kde_log_density(te, tr, h).sum()
    h = float(grid[int(np.argmax(scores))])
    return KDE(Z.copy(), h)


def calibrate_threshold(scores_val, labels_val) -> float:
    """F1-optimal threshold for predicting OOD when score > tau.

    Candidates are one point below the minimum plus every midpoint between
    adjacent distinct scores; equal F1 is resolved toward higher specificity,
    then the larger threshold.
    """
    s = np.asarray(scores_val, dtype=np.float64)
    y = np.asarray(labels_val).astype(bool)
    if y.all() or (~y).all():
        raise ValidationError("threshold calibration needs both classes")
    u = np.unique(s)
    below = u[0] - max(1.0, abs(u[0]))
    cands = np.concatenate([[below], (u[:-1] + u[1:]) / 2])
    best, best_key = cands[0], (-1.0, -1.0, -np.inf)
    for tau in cands:
        c = Confusion.from_predictions(s > tau, y)
        key = (c.f1, c.specificity, tau)
        if key > best_key:
            best, best_key = tau, key
    return float(best)


def risk_stratify(S, id_calibration_scores, cutoffs=RISK_CUTOFFS):
    """Percentile of S among ID calibration scores and the matching risk level."""
    cal = np.sort(np.asarray(id_calibration_scores, dtype=np.float64))
    if cal.size == 0:
        raise ValidationError("empty calibration scores")
    S_arr = np.atleast_1d(np.asarray(S, dtype=np.float64))
    pct = np.searchsorted(cal, S_arr, side="right") / cal.size
    levels = [RISK_LEVELS[int(np.searchsorted(cutoffs, p, side="right"))] for p in pct]
    if np.ndim(S) == 0:
        return float(pct[0]), levels[0]
    return pct, levels


@dataclass
class DetectorModel:
    pre: Preprocessor
    kde_id: KDE
    kde_ood: KDE | None
    threshold: float
    calibration: np.ndarray  # ID validation scores
    feature_names: list
    cutoffs: tuple = RISK_CUTOFFS
    meta: dict = field(default_factory=dict)

    @property
    def single_class(self) -> bool:
        return self.kde_ood is None

    def ldr(self, X) -> tuple[np.ndarray, np.ndarray]:
        """L = ln p_ID - ln p_OOD and S = -L (single-class mode: L = ln p_ID)."""
        Z = self.pre.transform(X)
        L = self.kde_id.log_density(Z)
        if self.kde_ood is not None:
            L = L - self.kde_ood.log_density(Z)
        return L, -L

    def score(self, X) -> np.ndarray:
        return self.ldr(X)[1]

    def decide(self, X):
        L, S = self.ldr(X)
        pct, levels = risk_stratify(S, self.calibration, self.cutoffs)
        return L, S, S > self.threshold, pct, levels

    def save(self, path) -> None:
        meta = {
            "feature_names": list(self.feature_names), "threshold": self.threshold,
            "h_id": self.kde_id.bandwidth, "h_ood": None if self.kde_ood is None else self.kde_ood.bandwidth,
            "cutoffs": list(self.cutoffs), "meta": self.meta,
        }
        arrays = {
            "sorted_train": self.pre.sorted_train, "mean": self.pre.mean, "std": self.pre.std,
            "basis": self.pre.basis, "constant": self.pre.constant, "kde_id": self.kde_id.points,
            "calibration": self.calibration, "meta_json": np.array(json.dumps(meta)),
        }
        if self.kde_ood is not None:
            arrays["kde_ood"] = self.kde_ood.points
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "DetectorModel":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"detector file not found: {path}")
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta_json"]))
            pre = Preprocessor(z["sorted_train"], z["mean"], z["std"], z["basis"], z["constant"])
            kde_id = KDE(z["kde_id"], meta["h_id"])
            kde_ood = KDE(z["kde_ood"], meta["h_ood"]) if "kde_ood" in z.files else None
            return cls(pre, kde_id, kde_ood, meta["threshold"], z["calibration"], meta["feature_names"],
                       tuple(meta["cutoffs"]), meta.get("meta", {}))


def fit_detector(X_id_train, X_ood_train, X_id_val, X_ood_val, feature_names=None, n_components: int = 15,
                 folds: int = 5, seed: int = 0, cutoffs=RISK_CUTOFFS) -> DetectorModel:
    """Fit T and both KDEs on training rows, then calibrate tau and risk cutoffs on validation rows.

    Passing ``X_ood_train=None`` gives the single-class variant scored by -ln p_ID.
    """
    X_id_train = np.asarray(X_id_train, dtype=np.float64)
    F = X_id_train.shape[1]
    n_components = min(n_components, F)
    pre = fit_preprocessor(X_id_train, n_components)
    kde_id = fit_kde(pre.transform(X_id_train), folds, seed=seed)
    kde_ood = None
    if X_ood_train is not None:
        kde_ood = fit_kde(pre.transform(X_ood_train), folds, seed=seed)
    model = DetectorModel(pre, kde_id, kde_ood, 0.0, np.zeros(1),
                          list(feature_names) if feature_names is not None else [f"f{i}" for i in range(F)],
                          tuple(cutoffs))
    s_id = model.score(X_id_val)
    if X_ood_val is not None and len(X_ood_val):
        s_ood = model.score(X_ood_val)
        model.threshold = calibrate_threshold(np.r_[s_id, s_ood], np.r_[np.zeros(len(s_id)), np.ones(len(s_ood))])
    else:
        model.threshold = float(np.quantile(s_id, cutoffs[0]))
    model.calibration = np.sort(s_id)
    model.meta = {"n_components": n_components, "folds": folds, "seed": seed,
                  "n_id_train": int(len(X_id_train)),
                  "n_ood_train": 0 if X_ood_train is None else int(len(X_ood_train))}
    return model


METRIC_NAMES = ("auroc", "accuracy", "precision", "recall", "f1", "specificity")


@dataclass
class EvalReport:
    draws: list[dict]
    B: int
    with_replacement: bool = False

    def summary(self) -> dict:
        out = {"B": self.B, "with_replacement": self.with_replacement}
        for m in METRIC_NAMES:
            vals = np.array([d[m] for d in self.draws])
            out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def mean(self, metric: str) -> float:
        return float(np.mean([d[metric] for d in self.draws]))

    def std(self, metric: str) -> float:
        return float(np.std([d[metric] for d in self.draws]))


def bootstrap_scores(s_id, s_ood, threshold: float, B: int = 100, rng=None, seed: int = 0) -> EvalReport:
    """Balanced bootstrap: every draw pairs all OOD scores with an equally sized ID subset."""
    s_id = np.asarray(s_id, dtype=np.float64)
    s_ood = np.asarray(s_ood, dtype=np.float64)
    if len(s_ood) < 2:
        raise ValidationError("bootstrap needs at least 2 OOD test points")
    if B < 1:
        raise ValidationError("B must be positive")
    replace = len(s_id) < len(s_ood)
    if replace:
        log.warning("ID test set smaller than OOD set; sampling ID with replacement")
    draws = []
    y = np.r_[np.zeros(len(s_ood)), np.ones(len(s_ood))]
    for b in range(B):
        r = np.random.default_rng([seed, b]) if rng is None else rng
        sub = s_id[r.choice(len(s_id), size=len(s_ood), replace=replace)]
        scores = np.r_[sub, s_ood]
        c = Confusion.from_predictions(scores > threshold, y)
        draws.append({"draw": b, "auroc": auroc(scores, y), **c.as_dict()})
    return EvalReport(draws, B, replace)


def bootstrap_evaluate(model: DetectorModel, X_id_test, X_ood_test, B: int = 100, rng=None, seed: int = 0) -> EvalReport:
    return bootstrap_scores(model.score(X_id_test), model.score(X_ood_test), model.threshold, B, rng, seed)


def cohens_d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise standardized mean difference (b - a) with pooled std."""
    na, nb = len(a), len(b)
    va, vb = a.var(axis=0, ddof=1), b.var(axis=0, ddof=1)
    pooled = np.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    diff = b.mean(axis=0) - a.mean(axis=0)
    return np.where(pooled > 0, diff / np.where(pooled > 0, pooled, 1.0), 0.0)


def _zscore(v: np.ndarray) -> np.ndarray:
    s = v.std()
    return (v - v.mean()) / s if s > 0 else np.zeros_like(v)


def feature_importance(X_id, X_ood, names=None, resamples: int = 50, seed: int = 0) -> list[tuple[str, float, float, float]]:
    """Rank features by z(|d|) + z(stability).

    |d| is Cohen's d between classes on quantile-normalised features (fit on
    ID). Stability is 1 / (1 + CV) where CV is the bootstrap standard
    deviation of d relative to its magnitude, so features whose separation is
    both large and reproducible rank first. Returns (name, score, d, stability)
    sorted descending.
    """
    X_id = np.asarray(X_id, dtype=np.float64)
    X_ood = np.asarray(X_ood, dtype=np.float64)
    if len(X_id) < 10 or len(X_ood) < 10:
        raise ValidationError("feature importance needs at least 10 rows per class")
    F = X_id.shape[1]
    names = list(names) if names is not None else [f"f{i}" for i in range(F)]
    pre = fit_preprocessor(X_id, n_components=1)
    A, B = pre.quantile(X_id), pre.quantile(X_ood)
    d = np.abs(cohens_d(A, B))
    rng = np.random.default_rng(seed)
    boot = np.empty((resamples, F))
    for r in range(resamples):
        ia = rng.integers(0, len(A), len(A))
        ib = rng.integers(0, len(B), len(B))
        boot[r] = np.abs(cohens_d(A[ia], B[ib]))
    cv = boot.std(axis=0) / (d + 1e-12)
    stability = 1.0 / (1.0 + cv)
    score = _zscore(d) + _zscore(stability)
    order = sorted(range(F), key=lambda j: (-score[j], j))
    return [(names[j], float(score[j]), float(d[j]), float(stability[j])) for j in order]
