import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajood.errors import ValidationError
from trajood.graph import (ALPHABET_SIZES, LIGAND, POCKET, ComplexGraph, PrototypeTable, assemble_state,
                           com_project, encode_types, iter_jsonl, read_jsonl, write_jsonl)
from trajood.schedule import (T_EPS, Schedule, alpha, loss_weight, precondition, sample_time, sigma,
                              time_grid)

finite = st.floats(-100, 100, allow_nan=False)


def test_com_project_examples():
    a = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert np.array_equal(com_project(a), a)
    assert np.array_equal(com_project(np.full((2, 3), 2.0)), np.zeros((2, 3)))


@given(arrays(np.float64, (5, 3), elements=finite))
def test_com_project_idempotent(M):
    P = com_project(M)
    np.testing.assert_allclose(com_project(P), P, atol=1e-12)
    np.testing.assert_allclose(P.mean(axis=0), 0.0, atol=1e-12)


def test_com_project_rejects_nonfinite():
    with pytest.raises(ValidationError):
        com_project(np.array([[np.nan, 0, 0], [0, 0, 0]]))


def test_encode_types_lookup():
    table = PrototypeTable(np.array([[1.0, 0], [0, 1.0]]))
    assert np.array_equal(encode_types([0], table), [[1.0, 0]])
    assert np.array_equal(encode_types([1, 1], table), [[0, 1.0], [0, 1.0]])
    with pytest.raises(ValidationError):
        encode_types([2], table)


@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 2**31))
def test_random_table_rows_unit_norm(V, d, seed):
    table = PrototypeTable.random(V, d, np.random.default_rng(seed))
    rows = encode_types(range(V), table)
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)


def _tables(d=2, seed=0):
    rng = np.random.default_rng(seed)
    return (PrototypeTable.random(ALPHABET_SIZES[LIGAND], d, rng), PrototypeTable.random(ALPHABET_SIZES[POCKET], d, rng))


def test_assemble_state_two_nodes_and_translation():
    tL, tP = _tables()
    g = ComplexGraph([[0.0, 0, 0], [1.0, 2, 3]], [0, 1], [LIGAND, POCKET], "g")
    s = assemble_state(g, tL, tP)
    np.testing.assert_allclose(s.coords.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(s.feats, axis=1), 1.0, atol=1e-12)
    moved = ComplexGraph(g.node_coords + 5.0, g.node_types, g.node_class, "g")
    s2 = assemble_state(moved, tL, tP)
    np.testing.assert_allclose(s2.coords, s.coords, atol=1e-12)
    assert np.array_equal(s2.feats, s.feats)


def test_single_node_graph_rejected():
    with pytest.raises(ValidationError):
        ComplexGraph([[0.0, 0, 0]], [0], [LIGAND])


def test_jsonl_round_trip(tmp_path, tiny_graphs):
    path = tmp_path / "g.jsonl"
    write_jsonl(tiny_graphs, path)
    back = read_jsonl(path)
    assert [g.graph_id for g in back] == [g.graph_id for g in tiny_graphs]
    for a, b in zip(back, tiny_graphs):
        assert np.array_equal(a.node_coords, b.node_coords)
        assert np.array_equal(a.node_types, b.node_types)
    assert len(list(iter_jsonl(path))) == len(tiny_graphs)


def test_jsonl_bad_line_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "x"}\n', encoding="utf-8")
    with pytest.raises(ValidationError, match=r"bad.jsonl:1"):
        read_jsonl(path)


S = Schedule(0.01, 10.0, 1.0)


def test_sigma_endpoints_and_midpoint():
    assert sigma(S, 0.0) == pytest.approx(0.01, rel=1e-15)
    assert sigma(S, 0.5) == pytest.approx(np.sqrt(0.1), rel=1e-12)
    assert sigma(S, 1.0) == pytest.approx(10.0, rel=1e-12)


def test_sigma_strictly_increasing():
    assert np.all(np.diff(sigma(S, np.linspace(0, 1, 1000))) > 0)


def test_alpha_is_log_ratio_and_matches_finite_difference():
    assert alpha(S, 0.3) == pytest.approx(np.log(1000.0), rel=1e-15)
    assert alpha(Schedule(1.0, np.e, 1.0), 0.7) == pytest.approx(1.0, rel=1e-15)
    # alpha = g^2 / (2 sigma^2) = sigma' / sigma
    h = 1e-6
    for t in (0.1, 0.5, 0.9):
        fd = (sigma(S, t + h) - sigma(S, t - h)) / (2 * h) / sigma(S, t)
        assert alpha(S, t) == pytest.approx(fd, rel=1e-6)


def test_precondition_limits_and_bounds():
    s = Schedule(1e-12, 10.0, 0.5)
    c_in, c_out = precondition(s, 0.0)
    assert c_in == pytest.approx(2.0, rel=1e-9)
    assert c_out < 1e-10
    c_in, c_out = precondition(S, np.linspace(0, 1, 500))
    assert np.all(c_in * S.sigma_data <= 1.0) and np.all(c_out <= 1.0)


def test_sample_time_mean_and_loss_weight():
    t = sample_time(np.random.default_rng(0), size=100_000)
    se = np.sqrt((1 - T_EPS) ** 2 / 12 / len(t))
    assert abs(t.mean() - (T_EPS + 1) / 2) <= 3 * se
    assert t.min() >= T_EPS and t.max() <= 1.0
    s = Schedule(0.01, 10.0, 0.5)
    t_data = np.log(0.5 / 0.01) / np.log(1000.0)
    assert loss_weight(s, t_data) == pytest.approx(2 / 0.25, rel=1e-12)
    assert np.all(loss_weight(S, np.linspace(0, 1, 100)) > 0)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        Schedule(1.0, 0.5, 1.0)
    with pytest.raises(ValidationError):
        sigma(S, 1.5)
    with pytest.raises(ValidationError):
        time_grid(0)
    g = time_grid(4)
    assert g[0] == T_EPS and g[-1] == 1.0 and len(g) == 5
