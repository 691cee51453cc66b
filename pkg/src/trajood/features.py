"""Nineteen summary statistics of a probability-flow trajectory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from trajood.errors import ValidationError
from trajood.graph import LIGAND, POCKET
from trajood.likelihood import TrajectoryRecord

FEATURE_NAMES = (
    "log_likelihood",
    "path_tortuosity",
    "path_efficiency",
    "vf_l2_std",
    "vf_l2_max",
    "vf_l2_mean",
    "mean_acceleration",
    "mean_lipschitz",
    "max_lipschitz",
    "coupling_consistency",
    "total_flow_energy",
    "vf_spikiness",
    "total_angular_deviation",
    "max_intermol_change",
    "smoothness_score",
    "coord_feature_ratio",
    "dynamic_coord_feature_coupling",
    "mean_com_drift",
    "max_com_drift",
)

EPS = 1e-12
TORTUOSITY_CAP = 1e6


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _mean_cross_distance(coords: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """Mean ligand-pocket distance for every time point, shape [T+1]."""
    lig, poc = coords[:, cls == LIGAND], coords[:, cls == POCKET]
    if lig.shape[1] == 0 or poc.shape[1] == 0:
        return np.zeros(coords.shape[0])
    diff = lig[:, :, None, :] - poc[:, None, :, :]
    return np.linalg.norm(diff, axis=3).mean(axis=(1, 2))


def compute_features(rec: TrajectoryRecord) -> dict[str, float]:
    T1 = len(rec.times)
    if T1 < 3 or rec.drifts.shape[0] != T1 or rec.coords.shape[0] != T1:
        raise ValidationError(f"trajectory {rec.graph_id!r} is incomplete (needs stored states and drifts)")
    x = rec.flat_states().reshape(T1, -1)
    f = rec.drifts.reshape(T1, -1)
    dt = np.diff(rec.times)
    dx = np.diff(x, axis=0)
    df = np.diff(f, axis=0)
    step = np.linalg.norm(dx, axis=1)
    path = float(step.sum())
    chord = float(np.linalg.norm(x[-1] - x[0]))
    tortuosity = path / chord if chord > 0 else TORTUOSITY_CAP
    efficiency = chord / path if path > 0 else 1.0

    v = np.linalg.norm(f, axis=1)
    acc = np.linalg.norm(df, axis=1) / dt
    lip = np.linalg.norm(df, axis=1) / np.maximum(step, EPS)
    cos = np.sum(f[1:] * f[:-1], axis=1) / np.maximum(v[1:] * v[:-1], EPS)
    angles = np.arccos(np.clip(cos, -1.0, 1.0))

    c = np.linalg.norm(rec.drifts[:, :, :3].reshape(T1, -1), axis=1)
    e = np.linalg.norm(rec.drifts[:, :, 3:].reshape(T1, -1), axis=1)
    dc, de = np.diff(c), np.diff(e)
    D = _mean_cross_distance(rec.coords, np.asarray(rec.node_class))

    mean_acc = float(acc.mean())
    out = {
        "log_likelihood": rec.loglik,
        "path_tortuosity": tortuosity,
        "path_efficiency": efficiency,
        "vf_l2_std": float(v.std()),
        "vf_l2_max": float(v.max()),
        "vf_l2_mean": float(v.mean()),
        "mean_acceleration": mean_acc,
        "mean_lipschitz": float(lip.mean()),
        "max_lipschitz": float(lip.max()),
        "coupling_consistency": float(np.mean(np.sign(dc) == np.sign(de))),
        "total_flow_energy": float(np.sum(f[:-1] * dx)),
        "vf_spikiness": float(v.max() / (v.mean() + EPS)),
        "total_angular_deviation": float(angles.sum()),
        "max_intermol_change": float(np.max(np.abs(D - D[0]))),
        "smoothness_score": 1.0 / (1.0 + mean_acc),
        "coord_feature_ratio": float(c.mean() / (e.mean() + EPS)),
        "dynamic_coord_feature_coupling": _pearson(dc, de),
        "mean_com_drift": float(np.mean(rec.com_drift)),
        "max_com_drift": float(np.max(rec.com_drift)),
    }
    bad = [k for k, val in out.items() if not np.isfinite(val)]
    if bad:
        raise ValidationError(f"trajectory {rec.graph_id!r}: non-finite features {bad}")
    return out


def feature_matrix(records) -> tuple[np.ndarray, list[str]]:
    records = list(records)
    if not records:
        raise ValidationError("no trajectory records")
    rows = [compute_features(r) for r in records]
    X = np.array([[row[k] for k in FEATURE_NAMES] for row in rows], dtype=np.float64)
    return X, list(FEATURE_NAMES)


def write_feature_csv(path, ids, X: np.ndarray, names, metadata: dict | None = None, extra=None) -> None:
    """CSV with header; floats use the shortest round-trip representation."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        extra_names = list(extra) if extra else []
        w.writerow(["id", *extra_names, *names])
        for i, gid in enumerate(ids):
            ex = [_fmt(extra[k][i]) for k in extra_names] if extra else []
            w.writerow([gid, *ex, *(repr(float(v)) for v in X[i])])
    if metadata is not None:
        Path(str(path) + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_feature_csv(path, columns=None) -> tuple[list[str], np.ndarray, list[str]]:
    """Return ids, the matrix of the selected columns (default: all 19 features), and their names."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"feature file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty feature file")
    header = rows[0]
    if header[0] != "id":
        raise ValidationError(f"{path}: first column must be 'id'")
    if columns is None:
        columns = [c for c in FEATURE_NAMES if c in header] or header[1:]
    missing = [c for c in columns if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    idx = [header.index(c) for c in columns]
    ids = [r[0] for r in rows[1:]]
    try:
        X = np.array([[float(r[i]) for i in idx] for r in rows[1:]], dtype=np.float64).reshape(len(ids), len(idx))
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric feature value ({exc})") from exc
    return ids, X, list(columns)
