"""Reverse-SDE sampling and sample-quality statistics."""

from __future__ import annotations

import networkx as nx
import numpy as np
from scipy.spatial.distance import jensenshannon

from trajood.batch import GraphBatch
from trajood.denoiser import _val
from trajood.errors import NumericalError, ValidationError
from trajood.graph import ALPHABET_SIZES, LIGAND, ComplexGraph
from trajood.schedule import T_EPS, diffusion_sq, sigma

BOND_THRESHOLD = 1.8


def _score(model, coords, feats, t, batch):
    sig = float(sigma(model.schedule, t))
    coord_hat, x0_feat, _ = model.x0(coords, feats, np.full(batch.n_graphs, sig), batch)
    sc = batch.com_project(_val(coord_hat) - coords) / sig**2
    return np.concatenate([sc, (_val(x0_feat) - feats) / sig**2], axis=1)


def reverse_sde_step(coords, feats, t: float, dt: float, model, batch: GraphBatch, rng=None, noise=None,
                     score=None):
    """One Euler-Maruyama step of the reverse SDE from t to t + dt (dt < 0).

    ``noise`` overrides the Gaussian draw (shape [N, 3+d]); ``rng=None`` with no
    noise gives the deterministic drift-only update. ``score`` overrides the
    model score with a callable (coords, feats, t) -> [N, 3+d].
    """
    if dt >= 0:
        raise ValidationError("reverse steps need dt < 0")
    g2 = float(diffusion_sq(model.schedule, t))
    s = score(coords, feats, t) if score is not None else _score(model, coords, feats, t, batch)
    x = np.concatenate([coords, feats], axis=1)
    x = x - g2 * s * dt
    if noise is None and rng is not None:
        noise = rng.standard_normal(x.shape)
    if noise is not None:
        eps = np.array(noise, dtype=np.float64)
        eps[:, :3] = batch.com_project(eps[:, :3])
        x = x + np.sqrt(g2 * abs(dt)) * eps
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite reverse-SDE update at t={t:.6g}")
    return batch.com_project(x[:, :3]), x[:, 3:]


def sample_batch(model, node_classes, steps: int = 400, rng=None, seed: int = 0, t_eps: float = T_EPS,
                 id_prefix: str = "sample") -> list[ComplexGraph]:
    """Draw one graph per entry of ``node_classes`` (each a class label array).

    Starts from N(0, sigma_max^2) with COM-free coordinates, integrates the
    reverse SDE on a uniform grid from 1 to t_eps, then reads types as the
    per-node argmax of the cosine logits at t = 0.
    """
    if steps < 1:
        raise ValidationError("steps must be at least 1")
    node_classes = [np.asarray(c, dtype=np.int64) for c in node_classes]
    if not node_classes or any(len(c) < 2 for c in node_classes):
        raise ValidationError("every sample needs at least 2 nodes")
    rng = np.random.default_rng(seed) if rng is None else rng
    batch = GraphBatch.build([len(c) for c in node_classes], np.concatenate(node_classes))
    d = model.cfg.d
    smax = model.schedule.sigma_max
    coords = batch.com_project(smax * rng.standard_normal((batch.n_nodes, 3)))
    feats = smax * rng.standard_normal((batch.n_nodes, d))
    grid = np.linspace(1.0, t_eps, steps + 1)
    for k in range(steps):
        coords, feats = reverse_sde_step(coords, feats, grid[k], grid[k + 1] - grid[k], model, batch, rng)
    out = model.at_time(coords, feats, 0.0, batch)
    types = np.array([int(np.argmax(z)) for z in out.logits(batch)], dtype=np.int64)
    graphs = []
    for i, (xc, ty, cls) in enumerate(zip(batch.split(coords), batch.split(types), node_classes)):
        graphs.append(ComplexGraph(xc, ty, cls, f"{id_prefix}-{i:05d}"))
    return graphs


def sample(model, node_class, steps: int = 400, rng=None, seed: int = 0) -> ComplexGraph:
    return sample_batch(model, [node_class], steps, rng, seed)[0]


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats between two (unnormalised) histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValidationError("histograms must be 1-D with the same support")
    if p.sum() <= 0 or q.sum() <= 0 or np.any(p < 0) or np.any(q < 0):
        raise ValidationError("histograms must be non-negative with positive mass")
    return float(jensenshannon(p, q) ** 2)


def type_histograms(graphs) -> tuple[np.ndarray, np.ndarray]:
    cls = np.concatenate([g.node_class for g in graphs])
    types = np.concatenate([g.node_types for g in graphs])
    lig = np.bincount(types[cls == LIGAND], minlength=ALPHABET_SIZES[0]).astype(float)
    poc = np.bincount(types[cls != LIGAND], minlength=ALPHABET_SIZES[1]).astype(float)
    return lig, poc


def bond_graph(coords: np.ndarray, threshold: float = BOND_THRESHOLD) -> nx.Graph:
    coords = np.asarray(coords, dtype=np.float64)
    G = nx.Graph()
    G.add_nodes_from(range(len(coords)))
    dist = np.linalg.norm(coords[:, None] - coords[None], axis=2)
    i, j = np.nonzero(np.triu(dist < threshold, k=1))
    G.add_edges_from(zip(i.tolist(), j.tolist()))
    return G


def fragment_stats(graph: ComplexGraph, threshold: float = BOND_THRESHOLD) -> tuple[int, bool, int, float]:
    """(n_fragments, fragmented, ring_count, mean_ring_size) over the ligand nodes."""
    lig = np.flatnonzero(graph.node_class == LIGAND)
    if lig.size == 0:
        raise ValidationError(f"graph {graph.graph_id!r} has no ligand nodes")
    G = bond_graph(graph.node_coords[lig], threshold)
    n_frag = nx.number_connected_components(G)
    rings = G.number_of_edges() - G.number_of_nodes() + n_frag
    basis = nx.minimum_cycle_basis(G) if rings else []
    mean_size = float(np.mean([len(c) for c in basis])) if basis else 0.0
    return n_frag, n_frag > 1, int(rings), mean_size
