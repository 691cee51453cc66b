import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from trajood import autodiff as ad
from trajood.batch import GraphBatch
from trajood.denoiser import (FIXED, THEORY, DenoiserConfig, _val, cosine_logits, interpolated_score, kappa,
                              posterior_mean_embedding)
from trajood.errors import ValidationError
from trajood.graph import LIGAND, ComplexGraph, PrototypeTable, class_features
from trajood.synthetic import generate_family, id_family
from trajood.trainer import Checkpoint, TrainConfig, _cross_entropy_sum, fit

E2 = np.array([[1.0, 0.0], [0.0, 1.0]])


def test_posterior_mean_embedding_examples():
    assert np.allclose(posterior_mean_embedding(np.array([[1e3, 0.0]]), E2), [[1.0, 0.0]])
    assert np.allclose(posterior_mean_embedding(np.array([[0.0, 0.0]]), E2), [[0.5, 0.5]])


def test_posterior_mean_embedding_direct_sum(rng):
    table = PrototypeTable.random(7, 3, rng)
    z = rng.normal(size=(20, 7)) * 3
    out = posterior_mean_embedding(z, table)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, sum(p[:, [k]] * table.prototypes[k] for k in range(7)), atol=1e-12)
    assert np.all(np.linalg.norm(out, axis=1) <= 1 + 1e-9)


def test_cosine_logits_and_temperature(rng):
    table = PrototypeTable.random(5, 4, rng)
    e1 = table.prototypes[[0]]
    z = cosine_logits(e1, table, [1.0])
    assert z[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(z[0], table.prototypes @ e1[0])
    h = rng.normal(size=(6, 4))
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    zt = cosine_logits(h, table, kappa(np.full(6, 2.0), THEORY))
    zf = cosine_logits(h, table, kappa(np.full(6, 2.0), FIXED))
    np.testing.assert_allclose(zt, 0.25 * zf)
    assert np.array_equal(zt.argmax(axis=1), zf.argmax(axis=1))


def test_interpolated_score_examples():
    x = np.random.default_rng(1).normal(size=(4, 5))
    assert np.allclose(interpolated_score(x, x, 0.7), 0.0)
    sig = 0.5
    x0 = x.copy()
    x0[:, 3] += sig**2
    s = interpolated_score(x, x0, sig)
    np.testing.assert_allclose(s[:, 3], 1.0)
    with pytest.raises(ValidationError):
        interpolated_score(x, x, 0.0)


def test_interpolated_score_gaussian_oracle():
    rng = np.random.default_rng(2)
    s2, sig = 1.7, 0.8
    x = rng.normal(size=(6, 5))
    x[:, :3] -= x[:, :3].mean(axis=0)
    x0 = x * s2 / (s2 + sig**2)
    np.testing.assert_allclose(interpolated_score(x, x0, sig), -x / (s2 + sig**2), atol=1e-10)


def _outputs(model, g, t):
    b = GraphBatch.from_graphs([g])
    f = class_features(g.node_types, g.node_class, model.table_L, model.table_P)
    return model.at_time(b.com_project(g.node_coords), f, t, b), b


def test_forward_rotation_and_identity(tiny_model, tiny_graphs):
    g = tiny_graphs[0]
    out, b = _outputs(tiny_model, g, 0.3)
    out_again, _ = _outputs(tiny_model, g, 0.3)
    assert np.array_equal(_val(out.coord_hat), _val(out_again.coord_hat))
    R = Rotation.random(random_state=7).as_matrix()
    g_rot = ComplexGraph(g.node_coords @ R.T, g.node_types, g.node_class, g.graph_id)
    out_r, _ = _outputs(tiny_model, g_rot, 0.3)
    c, c_r = _val(out.coord_hat), _val(out_r.coord_hat)
    assert np.linalg.norm(c @ R.T - c_r) <= 1e-10 * np.linalg.norm(c)
    for a, z in zip(out.logits(b), out_r.logits(b)):
        np.testing.assert_allclose(a, z, rtol=1e-5, atol=1e-12)


def test_forward_swap_identical_nodes(tiny_model):
    coords = np.array([[0.0, 0, 0], [1.5, 0, 0], [1.5, 0, 0], [0, 2.0, 0]])
    g = ComplexGraph(coords, [0, 1, 1, 2], [LIGAND] * 4, "twin")
    perm = [0, 2, 1, 3]
    g2 = ComplexGraph(coords[perm], g.node_types[perm], g.node_class[perm], "twin")
    o1, _ = _outputs(tiny_model, g, 0.5)
    o2, _ = _outputs(tiny_model, g2, 0.5)
    assert np.array_equal(_val(o1.coord_hat)[perm], _val(o2.coord_hat))


def test_uniform_logits_cross_entropy_is_log_v():
    V = 10
    ce = _cross_entropy_sum(ad.Var(np.zeros((3, V))), np.array([0, 4, 9]), np.zeros(3, dtype=int), 1)
    assert ce.value[0, 0] / 3 == pytest.approx(np.log(10.0), abs=1e-12)
    big = np.full((2, V), -50.0)
    big[[0, 1], [3, 7]] = 50.0
    ce = _cross_entropy_sum(ad.Var(big), np.array([3, 7]), np.zeros(2, dtype=int), 1)
    assert ce.value[0, 0] < 1e-30


def test_coordinate_mse_rotation_invariant(tiny_model, tiny_graphs):
    b = GraphBatch.from_graphs(tiny_graphs)
    r0 = b.com_project(np.concatenate([g.node_coords for g in tiny_graphs]))
    types = np.concatenate([g.node_types for g in tiny_graphs])
    f0 = class_features(types, b.node_class, tiny_model.table_L, tiny_model.table_P)
    rng = np.random.default_rng(5)
    sig = np.full(b.n_graphs, 0.7)
    r_t = r0 + 0.7 * b.com_project(rng.normal(size=r0.shape))
    f_t = f0 + 0.7 * rng.normal(size=f0.shape)
    R = Rotation.random(random_state=3).as_matrix()
    mse = []
    for rot in (np.eye(3), R):
        out = tiny_model(r_t @ rot.T, f_t, sig, b)
        mse.append(np.mean((_val(out.coord_hat) - r0 @ rot.T) ** 2))
    assert mse[0] == pytest.approx(mse[1], rel=1e-10)


SMALL = DenoiserConfig(n_layers=2, hidden=16, edge_dim=8, d=4)


def test_fit_lowers_validation_loss_and_is_deterministic(tmp_path):
    train = generate_family(id_family(seed=5, name="fit"), 50)
    val = generate_family(id_family(seed=6, name="fitval"), 16)
    tc = TrainConfig(learning_rate=1e-3, optimizer="adam", max_steps=200, max_epochs=1000, eval_every=100,
                     model=SMALL, seed=1)
    ck = fit(train, val, tc)
    assert ck.history[-1]["val_loss"] < ck.history[0]["val_loss"]
    tc_short = TrainConfig(learning_rate=1e-3, optimizer="adam", max_steps=20, max_epochs=100, eval_every=10,
                           model=SMALL, seed=1)
    h1 = fit(train, val, tc_short).history
    h2 = fit(train, val, tc_short).history
    assert h1 == h2
    path = tmp_path / "ck.json"
    ck.save(path)
    back = Checkpoint.load(path)
    for k, v in ck.params.items():
        assert np.array_equal(back.params[k], v)


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"learning_rate": 1e-3, "bogus": 1})
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop")
