import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajood.detector import (KDE, DetectorModel, bootstrap_scores, calibrate_threshold, cohens_d,
                              feature_importance, fit_detector, fit_kde, fit_preprocessor, kde_log_density,
                              risk_stratify)
from trajood.errors import ValidationError


def test_preprocessor_centres_principal_components(rng):
    X = rng.normal(size=(200, 6)) @ rng.normal(size=(6, 6))
    pre = fit_preprocessor(X, n_components=4)
    Z = pre.transform(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-9)
    Q = pre.standardize(X)
    np.testing.assert_allclose(Q.var(axis=0), 1.0, atol=1e-9)


def test_preprocessor_rank_invariant(rng):
    X = rng.normal(size=(100, 3))
    Y = X.copy()
    Y[:, 1] = np.exp(3 * Y[:, 1]) + 7
    a, b = fit_preprocessor(X, 2), fit_preprocessor(Y, 2)
    np.testing.assert_allclose(a.quantile(X), b.quantile(Y), atol=0)


def test_full_rank_projection_is_isometry(rng):
    X = rng.normal(size=(80, 5))
    pre = fit_preprocessor(X, n_components=5)
    Q = pre.standardize(X)
    Z = pre.transform(X)
    d_q = np.linalg.norm(Q[:, None] - Q[None], axis=2)
    d_z = np.linalg.norm(Z[:, None] - Z[None], axis=2)
    np.testing.assert_allclose(d_z, d_q, atol=1e-9)


def test_preprocessor_needs_more_rows_than_components(rng):
    with pytest.raises(ValidationError):
        fit_preprocessor(rng.normal(size=(5, 8)), n_components=5)


def test_kde_single_point_value():
    assert np.exp(kde_log_density(np.zeros((1, 1)), np.zeros((1, 1)), 1.0))[0] == pytest.approx(0.3989422804, abs=1e-9)


def test_kde_integrates_to_one(rng):
    pts = rng.normal(size=(50, 2))
    kde = KDE(pts, 0.4)
    box = 6.0
    U = rng.uniform(-box, box, size=(200_000, 2))
    integral = np.mean(np.exp(kde.log_density(U))) * (2 * box) ** 2
    assert abs(integral - 1.0) < 0.02


def test_kde_peak_grows_as_bandwidth_shrinks():
    pts = np.repeat(np.array([[0.0, 1.0], [2.0, -1.0]]), 3, axis=0)
    vals = [kde_log_density(pts[:1], pts, h)[0] for h in np.geomspace(2.0, 0.05, 12)]
    assert np.all(np.diff(vals) > 0)


def test_fit_kde_selects_from_grid(rng):
    kde = fit_kde(rng.normal(size=(60, 2)), folds=5)
    assert kde.bandwidth > 0
    with pytest.raises(ValidationError):
        fit_kde(np.zeros((3, 2)), folds=5)


def test_ldr_equal_densities_and_separated_geometry(rng):
    X = rng.normal(size=(60, 3))
    model = fit_detector(X[:40], X[:40], X[40:], X[40:] + 0.1, n_components=3)
    L, S = model.ldr(X[:5])
    np.testing.assert_allclose(L, 0.0, atol=1e-12)
    np.testing.assert_allclose(S, 0.0, atol=1e-12)
    A = rng.normal(size=(80, 3))
    B = rng.normal(size=(80, 3)) + 6.0
    model = fit_detector(A[:60], B[:60], A[60:], B[60:], n_components=3)
    assert np.all(model.score(A[:60]) < 0)


def test_threshold_examples():
    s = np.array([-2.0, -1.0, 1.0, 2.0])
    y = np.array([0, 0, 1, 1])
    assert calibrate_threshold(s, y) == 0.0
    tau = calibrate_threshold(np.ones(4), y)
    assert tau < 1.0
    with pytest.raises(ValidationError):
        calibrate_threshold(s, np.ones(4))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=30), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_threshold_order_invariant(scores, seed):
    s = np.array(scores)
    y = np.arange(len(s)) % 2
    p = np.random.default_rng(seed).permutation(len(s))
    assert calibrate_threshold(s, y) == calibrate_threshold(s[p], y[p])


def test_risk_stratify_boundaries():
    cal = np.arange(1.0, 101.0)
    assert risk_stratify(-5.0, cal) == (0.0, "Low")
    assert risk_stratify(500.0, cal) == (1.0, "High")
    pct, _ = risk_stratify(np.median(cal), cal)
    assert abs(pct - 0.5) <= 1 / len(cal)
    assert risk_stratify(95.0, cal)[1] == "Medium"


def test_bootstrap_perfect_separation():
    rep = bootstrap_scores(np.zeros(20), np.ones(20), 0.5, B=30)
    assert rep.mean("auroc") == 1.0 and rep.std("auroc") == 0.0
    assert rep.mean("f1") == 1.0


def test_detector_save_load_round_trip(tmp_path, rng):
    A, B = rng.normal(size=(80, 4)), rng.normal(size=(80, 4)) + 2
    model = fit_detector(A[:60], B[:60], A[60:], B[60:], n_components=3)
    path = tmp_path / "det.bin"
    model.save(path)
    back = DetectorModel.load(path)
    X = rng.normal(size=(10, 4))
    assert np.array_equal(back.score(X), model.score(X)) and back.threshold == model.threshold
    single = fit_detector(A[:60], None, A[60:], None, n_components=3)
    assert single.single_class
    np.testing.assert_allclose(single.score(X), -single.kde_id.log_density(single.pre.transform(X)))
    with pytest.raises(ValidationError):
        DetectorModel.load(tmp_path / "missing.bin")


def test_feature_importance_identical_and_duplicated(rng):
    A = rng.normal(size=(60, 4))
    B = rng.normal(size=(60, 4))
    B[:, 0] += 2.0
    B[:, 3] = A[:, 3]
    A2, B2 = np.column_stack([A, A[:, 0]]), np.column_stack([B, B[:, 0]])
    ranked = feature_importance(A2, B2, names=["a", "b", "c", "same", "a2"], resamples=30)
    by = {r[0]: r for r in ranked}
    assert by["same"][2] == 0.0 and ranked[-1][0] == "same"
    assert by["a"][1] == by["a2"][1]
    assert {ranked[0][0], ranked[1][0]} == {"a", "a2"}


def test_cohens_d_sign_and_scale():
    a = np.array([[0.0], [2.0]])
    b = np.array([[2.0], [4.0]])
    assert cohens_d(a, b)[0] == pytest.approx(2 / np.sqrt(2))
