import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajood.errors import ValidationError
from trajood.features import FEATURE_NAMES, compute_features, feature_matrix, read_feature_csv, write_feature_csv
from trajood.graph import LIGAND, POCKET, ComplexGraph, JointState
from trajood.likelihood import (GaussianOracle, TrajectoryRecord, batch_log_likelihood, hutchinson_divergence,
                                pf_drift, terminal_log_density)
from trajood.schedule import Schedule, alpha, sigma

S = Schedule(0.01, 10.0, 1.0)


def test_terminal_density_examples():
    s1 = Schedule(0.01, 1.0, 1.0)
    assert terminal_log_density(np.zeros((2, 3)), np.zeros((2, 0)), s1) == pytest.approx(-1.5 * np.log(2 * np.pi))
    s2 = Schedule(0.01, 2.0, 1.0)
    n, d = 3, 2
    diff = (terminal_log_density(np.zeros((n, 3)), np.zeros((n, d)), s2)
            - terminal_log_density(np.zeros((n, 3)), np.zeros((n, d)), s1))
    assert diff == pytest.approx(-(3 * n - 3 + n * d) * np.log(2))


def test_terminal_density_normalizes_on_com_free_subspace():
    # n=2, d=1: coordinates have 3 free dofs along r = (u, -u); use q = (r1 - r2)/sqrt(2)
    rng = np.random.default_rng(0)
    sched = Schedule(0.01, 1.0, 1.0)
    half = 4.0
    N = 1_000_000
    q = rng.uniform(-half, half, size=(N, 3))
    f = rng.uniform(-half, half, size=(N, 2))
    r = np.stack([q / np.sqrt(2), -q / np.sqrt(2)], axis=1)
    lp = -np.sum(r**2, axis=(1, 2)) / 2 - np.sum(f**2, axis=1) / 2 - 0.5 * 5 * np.log(2 * np.pi)
    ref = terminal_log_density(r[0], f[0].reshape(2, 1), sched)
    assert lp[0] == pytest.approx(ref, rel=1e-12)
    integral = np.mean(np.exp(lp)) * (2 * half) ** 5
    assert abs(integral - 1.0) < 0.05


def test_hutchinson_diagonal_is_exact_per_probe():
    D = np.array([2.0, 3.0])
    est, samples = hutchinson_divergence(np.ones((1, 2)), 0.5, lambda x, t: x * D, probes=10, n_coord=0,
                                         rng=np.random.default_rng(0), return_samples=True)
    assert np.all(samples == 5.0) and est == 5.0


def test_hutchinson_vjp_matches_directional_fd():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 6))
    x = rng.normal(size=(1, 6))
    drift = lambda z, t: z @ A.T  # noqa: E731
    v = hutchinson_divergence(x, 0.5, drift, probes=50, n_coord=0, rng=np.random.default_rng(3))
    f = hutchinson_divergence(x, 0.5, drift, probes=50, n_coord=0, rng=np.random.default_rng(3), method="fd")
    assert v == pytest.approx(f, abs=1e-6)


def test_hutchinson_rejects_bad_arguments():
    with pytest.raises(ValidationError):
        hutchinson_divergence(np.ones((1, 2)), 0.5, lambda x, t: x, probes=0)
    with pytest.raises(ValidationError):
        hutchinson_divergence(np.ones((1, 2)), 0.5, lambda x, t: x, probe_kind="sobol",
                              rng=np.random.default_rng(0))


def test_pf_drift_gaussian_oracle():
    oracle = GaussianOracle(S, s2=1.3, d=2)
    rng = np.random.default_rng(4)
    c = rng.normal(size=(5, 3))
    c -= c.mean(axis=0)
    f = rng.normal(size=(5, 2))
    t = 0.6
    state = JointState(c, f, t)
    drift = pf_drift(state, t, oracle)
    sig2 = float(sigma(S, t)) ** 2
    g2 = 2 * sig2 * alpha(S, t)
    score = -np.concatenate([c, f], axis=1) / (oracle.s2 + sig2)
    np.testing.assert_allclose(drift, -0.5 * g2 * score, atol=1e-10)


def test_pf_drift_zero_when_estimate_equals_state():
    class Identity:
        schedule = S

        def x0(self, coords, feats, sig_graph, batch):
            return coords, feats, np.zeros((batch.n_graphs, 3))

    state = JointState(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.ones((2, 2)), 0.4)
    assert np.all(pf_drift(state, 0.4, Identity()) == 0)


def test_loglik_permutation_invariant_and_deterministic(tiny_model, tiny_graphs):
    g = tiny_graphs[1]
    perm = np.random.default_rng(8).permutation(g.n)
    g2 = ComplexGraph(g.node_coords[perm], g.node_types[perm], g.node_class[perm], g.graph_id)
    a, b = batch_log_likelihood([g, g2], tiny_model, steps=16, probes=2, seed=0, keep_trajectory=False)
    assert a.loglik == pytest.approx(b.loglik, rel=1e-9)
    (c,) = batch_log_likelihood([g], tiny_model, steps=16, probes=2, seed=0, keep_trajectory=False)
    assert c.loglik == a.loglik


def test_trajectory_record_replay_and_npz(tmp_path, tiny_model, tiny_graphs):
    (rec,) = batch_log_likelihood(tiny_graphs[:1], tiny_model, steps=8, probes=1, seed=0)
    np.testing.assert_allclose(rec.replay(), rec.flat_states()[-1], atol=1e-10)
    path = tmp_path / "r.npz"
    rec.to_npz(path)
    back = TrajectoryRecord.from_npz(path)
    assert back.loglik == rec.loglik and np.array_equal(back.drifts, rec.drifts)
    assert compute_features(back) == compute_features(rec)
    assert compute_features(rec)["log_likelihood"] == rec.loglik


def _line_record(T=12, spike=None):
    times = np.linspace(0.001, 1.0, T + 1)
    v = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    vf = np.array([[0.5], [0.25]])
    coords = np.stack([v * t for t in times])
    feats = np.stack([vf * t for t in times])
    drift = np.concatenate([v, vf], axis=1)
    drifts = np.repeat(drift[None], T + 1, axis=0)
    if spike is not None:
        # one entry 10x the others: max / mean = 10 (T+1) / (T + 10)
        drifts[spike] *= 10.0
    return TrajectoryRecord("line", times, coords, feats, drifts, drifts[1:].copy(), np.zeros(T), np.zeros(T),
                            loglik=-3.0, log_p1=-1.0, n_probes=1, probe_kind="rademacher",
                            node_class=np.array([LIGAND, POCKET]))


def test_straight_line_features():
    f = compute_features(_line_record())
    assert f["path_tortuosity"] == pytest.approx(1.0, abs=1e-12)
    assert f["path_efficiency"] == pytest.approx(1.0, abs=1e-12)
    assert f["total_angular_deviation"] == pytest.approx(0.0, abs=1e-6)
    assert f["vf_spikiness"] == pytest.approx(1.0, abs=1e-12)
    assert f["log_likelihood"] == -3.0


@pytest.mark.parametrize("T", [10, 20, 50])
def test_spikiness_single_spike(T):
    f = compute_features(_line_record(T, spike=T // 2))
    assert 5 < f["vf_spikiness"] <= 10


def test_feature_matrix_shape_and_identical_rows():
    X, names = feature_matrix([_line_record()] * 3)
    assert X.shape == (3, 19) and names == list(FEATURE_NAMES)
    assert np.array_equal(X[0], X[1]) and np.array_equal(X[1], X[2])
    with pytest.raises(ValidationError):
        feature_matrix([])


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=19, max_size=19))
@settings(max_examples=30, deadline=None)
def test_feature_csv_round_trip_bit_exact(tmp_path_factory, row):
    path = tmp_path_factory.mktemp("csv") / "f.csv"
    X = np.array([row, row[::-1]])
    write_feature_csv(path, ["a", "b"], X, list(FEATURE_NAMES), metadata={"k": 1})
    ids, back, names = read_feature_csv(path)
    assert ids == ["a", "b"] and names == list(FEATURE_NAMES)
    assert back.tobytes() == X.tobytes()


def test_short_trajectory_rejected():
    rec = _line_record(T=1)
    with pytest.raises(ValidationError):
        compute_features(rec)
