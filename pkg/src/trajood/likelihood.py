"""Probability-flow ODE log-likelihood with Hutchinson divergence estimates.

The ODE is integrated from ``t_eps`` to 1 with Heun's method on a uniform
grid. The divergence integral is accumulated with the trapezoid rule on the
same predictor/corrector points, so the augmented system (state, log-density
change) is integrated to second order.

Probe vectors for each graph come from a private stream keyed on the graph id
and are laid out in a canonical node order and principal-axis frame fixed by
the initial state. This makes the estimate invariant to node relabelling and
rigid rotations of the input, while staying unbiased.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from trajood import autodiff as ad
from trajood.batch import GraphBatch
from trajood.errors import NumericalError, ValidationError
from trajood.graph import ComplexGraph, JointState, class_features
from trajood.schedule import T_EPS, Schedule, alpha, sigma, time_grid

RADEMACHER = "rademacher"
GAUSSIAN = "gaussian"
EXACT = "exact"
EXACT_MAX_DIM = 64


class GaussianOracle:
    """Analytic posterior mean for data distributed as N(0, s^2 I)."""

    def __init__(self, schedule: Schedule, s2: float = 1.0, d: int = 4):
        self.schedule, self.s2, self.d = schedule, float(s2), d

    def x0(self, coords, feats, sig_graph, batch: GraphBatch):
        k = (self.s2 / (self.s2 + np.square(sig_graph)))[batch.graph_index][:, None]
        return coords * k, feats * k, np.zeros((batch.n_graphs, 3))

    def log_density(self, coords: np.ndarray, feats: np.ndarray, t: float = T_EPS) -> float:
        """Exact log-density of the noised marginal in the COM-free subspace."""
        n, d = feats.shape
        v = self.s2 + float(sigma(self.schedule, t)) ** 2
        dof = 3 * n - 3 + n * d
        return float(-(np.sum(coords**2) + np.sum(feats**2)) / (2 * v) - 0.5 * dof * np.log(2 * np.pi * v))

    def flow_log_likelihood(self, coords: np.ndarray, feats: np.ndarray, t0: float = T_EPS) -> float:
        """Closed-form solution of the discretised problem: exact flow + terminal density."""
        n, d = feats.shape
        v0 = self.s2 + float(sigma(self.schedule, t0)) ** 2
        v1 = self.s2 + self.schedule.sigma_max**2
        scale = np.sqrt(v1 / v0)
        dof = 3 * n - 3 + n * d
        return terminal_log_density(coords * scale, feats * scale, self.schedule) + 0.5 * dof * np.log(v1 / v0)

    def entropy(self, n: int, t: float = T_EPS) -> float:
        v = self.s2 + float(sigma(self.schedule, t)) ** 2
        dof = 3 * n - 3 + n * self.d
        return 0.5 * dof * (1.0 + np.log(2 * np.pi * v))


def terminal_log_density(coords, feats, schedule: Schedule, n: int | None = None, d: int | None = None) -> float:
    """Isotropic Gaussian at sigma_max with 3 translational dofs removed."""
    coords = np.asarray(coords, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64).reshape(coords.shape[0], -1)
    n = coords.shape[0] if n is None else n
    d = feats.shape[1] if d is None else d
    var = schedule.sigma_max**2
    log_norm = np.log(2 * np.pi * var)
    lp_r = -np.sum(coords**2) / (2 * var) - 0.5 * (3 * n - 3) * log_norm
    lp_f = -np.sum(feats**2) / (2 * var) - 0.5 * n * d * log_norm
    return float(lp_r + lp_f)


def graph_stream(seed: int, graph_id: str) -> np.random.Generator:
    digest = hashlib.sha256(str(graph_id).encode("utf-8")).digest()
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")])


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Node ranking by distance from the centroid (stable for distinct radii)."""
    r2 = np.sum((coords - coords.mean(axis=0)) ** 2, axis=1)
    return np.argsort(r2, kind="stable")


def canonical_frame(coords: np.ndarray) -> np.ndarray:
    """Principal axes with signs fixed by the third moment along each axis."""
    c = coords - coords.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    proj = c @ vecs
    signs = np.where(np.sum(proj**3, axis=0) < 0, -1.0, 1.0)
    return vecs * signs


def draw_probe(rng: np.random.Generator, kind: str, shape) -> np.ndarray:
    if kind == RADEMACHER:
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    if kind == GAUSSIAN:
        return rng.standard_normal(shape)
    raise ValidationError(f"unknown probe kind {kind!r}")


def hutchinson_divergence(x, t, drift_fn, probes: int = 1, probe_kind: str = RADEMACHER,
                          rng: np.random.Generator | None = None, n_coord: int = 3,
                          method: str = "vjp", fd_step: float = 1e-4, return_samples: bool = False):
    """Hutchinson estimate of tr(d drift / dx) for one state.

    ``x`` is a JointState or an [n x k] array whose first ``n_coord`` columns
    form the COM-constrained block (use ``n_coord=0`` for an unconstrained
    vector). ``drift_fn(x, t)`` must accept and return arrays or autodiff
    variables of the same shape. ``method="fd"`` replaces the reverse pass by a
    central directional difference.
    """
    if probes < 1:
        raise ValidationError("need at least one probe")
    rng = np.random.default_rng() if rng is None else rng
    if isinstance(x, JointState):
        x = x.flat()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if method == "vjp":
        X = ad.Var(x)
        out = ad.as_var(drift_fn(X, t))
        back = ad.VJP(out, [X])
    samples = np.empty(probes)
    for j in range(probes):
        eps = draw_probe(rng, probe_kind, x.shape)
        if n_coord:
            eps[:, :n_coord] -= eps[:, :n_coord].mean(axis=0, keepdims=True)
        if method == "vjp":
            (g,) = back(eps)
            samples[j] = np.sum(g * eps)
        elif method == "fd":
            hi = np.asarray(_value(drift_fn(x + fd_step * eps, t)))
            lo = np.asarray(_value(drift_fn(x - fd_step * eps, t)))
            samples[j] = np.sum(eps * (hi - lo)) / (2 * fd_step)
        else:
            raise ValidationError(f"unknown divergence method {method!r}")
    est = float(samples.mean())
    return (est, samples) if return_samples else est


def _value(v):
    return v.value if isinstance(v, ad.Var) else v


@dataclass
class TrajectoryRecord:
    graph_id: str
    times: np.ndarray  # [T+1]
    coords: np.ndarray  # [T+1, n, 3]
    feats: np.ndarray  # [T+1, n, d]
    drifts: np.ndarray  # [T+1, n, 3+d] drift at each grid state
    pred_drifts: np.ndarray  # [T, n, 3+d] drift at each Heun predictor
    div_estimates: np.ndarray  # [T] trapezoid divergence per step
    com_drift: np.ndarray  # [T] COM norm of the unprojected coordinate increment
    loglik: float
    log_p1: float
    n_probes: int
    probe_kind: str
    node_class: np.ndarray
    flow_energy: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.coords.shape[1]

    @property
    def states(self) -> list[JointState]:
        return [JointState(c, f, t, self.node_class) for c, f, t in zip(self.coords, self.feats, self.times)]

    def flat_states(self) -> np.ndarray:
        return np.concatenate([self.coords, self.feats], axis=2)

    def replay(self) -> np.ndarray:
        """Re-run the Heun update from the first state using stored drifts."""
        x = self.flat_states()[0].copy()
        for k in range(len(self.times) - 1):
            dt = self.times[k + 1] - self.times[k]
            x = x + 0.5 * dt * (self.drifts[k] + self.pred_drifts[k])
            x[:, :3] -= x[:, :3].mean(axis=0)
        return x

    def to_npz(self, path) -> None:
        np.savez(
            path, graph_id=np.array(self.graph_id), times=self.times, coords=self.coords, feats=self.feats,
            drifts=self.drifts, pred_drifts=self.pred_drifts, div_estimates=self.div_estimates,
            com_drift=self.com_drift, loglik=self.loglik, log_p1=self.log_p1, n_probes=self.n_probes,
            probe_kind=np.array(self.probe_kind), node_class=self.node_class, flow_energy=self.flow_energy,
        )

    @classmethod
    def from_npz(cls, path) -> "TrajectoryRecord":
        with np.load(path) as z:
            return cls(
                graph_id=str(z["graph_id"]), times=z["times"], coords=z["coords"], feats=z["feats"],
                drifts=z["drifts"], pred_drifts=z["pred_drifts"], div_estimates=z["div_estimates"],
                com_drift=z["com_drift"], loglik=float(z["loglik"]), log_p1=float(z["log_p1"]),
                n_probes=int(z["n_probes"]), probe_kind=str(z["probe_kind"]), node_class=z["node_class"],
                flow_energy=float(z["flow_energy"]),
            )


class _Evaluation:
    """Drift at one (state, t) for the whole batch plus its reverse pass."""

    def __init__(self, model, batch: GraphBatch, coords, feats, t: float, need_vjp: bool):
        sched = model.schedule
        sig = np.full(batch.n_graphs, float(sigma(sched, t)))
        a = float(alpha(sched, t))
        X, F = ad.Var(coords), ad.Var(feats)
        coord_hat, feat_hat, coord_com = model.x0(X, F, sig, batch)
        dc = (X - coord_hat) * a
        dc = dc - ad.spmm(batch.node_mean, dc)
        df = (F - feat_hat) * a
        self.n_coord = 3
        self.value = np.concatenate([dc.value, ad.as_var(df).value], axis=1)
        self.raw_com = -a * np.asarray(coord_com)
        if not np.all(np.isfinite(self.value)):
            raise NumericalError(f"non-finite drift at t={t:.6g}")
        self._back = None
        if need_vjp:
            out = ad.concat([dc, df], axis=1)
            self._back = ad.VJP(out, [X, F])

    def vjp(self, cot: np.ndarray) -> np.ndarray:
        gx, gf = self._back(cot)
        return np.concatenate([gx, gf], axis=1)


class _ProbeSampler:
    def __init__(self, graphs_coords, graph_ids, batch: GraphBatch, width: int, kind: str, seed: int):
        self.batch, self.width, self.kind = batch, width, kind
        self.rngs = [graph_stream(seed, gid) for gid in graph_ids]
        self.orders = [canonical_order(c) for c in graphs_coords]
        self.frames = [canonical_frame(c) for c in graphs_coords]

    def draw(self, m: int) -> np.ndarray:
        out = np.empty((m, self.batch.n_nodes, self.width))
        for rng, order, frame, off, n in zip(self.rngs, self.orders, self.frames,
                                             self.batch.offsets, self.batch.sizes):
            block = out[:, off:off + n]
            block[:, order] = draw_probe(rng, self.kind, (m, n, self.width))
            xyz = block[:, :, :3] @ frame.T
            block[:, :, :3] = xyz - xyz.mean(axis=1, keepdims=True)
        return out


def _com_free_basis(n: int, d: int) -> np.ndarray:
    """Orthonormal basis (rows) of the COM-free joint state space, shape [D, n, 3+d]."""
    q, _ = np.linalg.qr(np.concatenate([np.ones((n, 1)), np.eye(n)[:, : n - 1]], axis=1))
    q = q[:, 1:n]  # orthogonal complement of the constant vector
    basis = []
    for a in range(n - 1):
        for c in range(3):
            b = np.zeros((n, 3 + d))
            b[:, c] = q[:, a]
            basis.append(b)
    for i in range(n):
        for j in range(d):
            b = np.zeros((n, 3 + d))
            b[i, 3 + j] = 1.0
            basis.append(b)
    return np.array(basis)


def _divergence(ev: _Evaluation, batch: GraphBatch, probes: np.ndarray | None, basis) -> np.ndarray:
    div = np.zeros(batch.n_graphs)
    if basis is not None:
        for k in range(basis.shape[0]):
            v = basis[k]
            div += batch.graph_sum(v * ev.vjp(v))
        return div
    acc = np.zeros(probes.shape[1:])
    for eps in probes:
        acc += eps * ev.vjp(eps)
    return batch.graph_sum(acc) / len(probes)


def _stacked_basis(batch: GraphBatch, d: int) -> np.ndarray:
    dims = [3 * n - 3 + n * d for n in batch.sizes]
    if max(dims) > EXACT_MAX_DIM:
        raise ValidationError(f"exact divergence limited to n*(3+d) <= {EXACT_MAX_DIM}")
    out = np.zeros((max(dims), batch.n_nodes, 3 + d))
    for off, n, D in zip(batch.offsets, batch.sizes, dims):
        out[:D, off:off + n] = _com_free_basis(int(n), d)
    return out


def integrate_batch(model, graphs_coords, graphs_feats, node_class, graph_ids, steps: int = 128,
                    probes: int = 4, probe_kind: str = RADEMACHER, seed: int = 0,
                    t_eps: float = T_EPS, keep_trajectory: bool = True) -> list[TrajectoryRecord]:
    """Integrate the PF-ODE for several graphs at once.

    The per-graph results do not depend on which other graphs share the batch
    beyond floating-point summation order inside linear algebra kernels.
    """
    if steps < 2:
        raise ValidationError("grid size must be at least 2")
    if probes < 1:
        raise ValidationError("need at least one probe")
    sizes = [len(c) for c in graphs_coords]
    batch = GraphBatch.build(sizes, np.concatenate(node_class))
    d = graphs_feats[0].shape[1]
    coords = batch.com_project(np.concatenate(graphs_coords))
    feats = np.concatenate(graphs_feats).astype(np.float64)
    split_coords = batch.split(coords)
    basis = _stacked_basis(batch, d) if probe_kind == EXACT else None
    sampler = None if basis is not None else _ProbeSampler(split_coords, graph_ids, batch, 3 + d, probe_kind, seed)

    grid = time_grid(steps, t_eps)
    x = np.concatenate([coords, feats], axis=1)
    ev = _Evaluation(model, batch, x[:, :3], x[:, 3:], grid[0], True)
    hist_x = [x] if keep_trajectory else None
    hist_f = [ev.value] if keep_trajectory else None
    hist_p = []
    divs = np.zeros((steps, batch.n_graphs))
    comd = np.zeros((steps, batch.n_graphs))
    energy = np.zeros(batch.n_graphs)
    ell = np.zeros(batch.n_graphs)
    for k in range(steps):
        dt = grid[k + 1] - grid[k]
        eps = None if sampler is None else sampler.draw(probes)
        div0 = _divergence(ev, batch, eps, basis)
        pred = x + dt * ev.value
        ev_p = _Evaluation(model, batch, pred[:, :3], pred[:, 3:], grid[k + 1], True)
        div1 = _divergence(ev_p, batch, eps, basis)
        step_div = 0.5 * (div0 + div1)
        if not np.all(np.isfinite(step_div)):
            raise NumericalError(f"non-finite divergence estimate at step {k}")
        incr = 0.5 * dt * (ev.value + ev_p.value)
        comd[k] = np.linalg.norm(0.5 * dt * (ev.raw_com + ev_p.raw_com), axis=1)
        x_new = x + incr
        x_new[:, :3] = batch.com_project(x_new[:, :3])
        energy += batch.graph_sum(ev.value * (x_new - x))
        divs[k] = step_div
        ell += dt * step_div
        if keep_trajectory:
            hist_p.append(ev_p.value)
        x = x_new
        ev = _Evaluation(model, batch, x[:, :3], x[:, 3:], grid[k + 1], k + 1 < steps or keep_trajectory)
        if keep_trajectory:
            hist_x.append(x)
            hist_f.append(ev.value)

    records = []
    final = batch.split(x)
    for g, gid in enumerate(graph_ids):
        off, n = batch.offsets[g], batch.sizes[g]
        lp1 = terminal_log_density(final[g][:, :3], final[g][:, 3:], model.schedule)
        loglik = lp1 + ell[g]
        if not np.isfinite(loglik):
            raise NumericalError(f"graph {gid!r}: non-finite log-likelihood")
        if keep_trajectory:
            xs = np.array([h[off:off + n] for h in hist_x])
            fs = np.array([h[off:off + n] for h in hist_f])
            ps = np.array([h[off:off + n] for h in hist_p])
        else:
            xs = final[g][None]
            fs = ps = np.zeros((0, n, 3 + d))
        records.append(TrajectoryRecord(
            graph_id=gid, times=grid.copy(), coords=xs[:, :, :3], feats=xs[:, :, 3:], drifts=fs,
            pred_drifts=ps, div_estimates=divs[:, g].copy(), com_drift=comd[:, g].copy(),
            loglik=float(loglik), log_p1=float(lp1), n_probes=probes if basis is None else 0,
            probe_kind=probe_kind, node_class=np.asarray(node_class[g]), flow_energy=float(energy[g]),
        ))
    return records


def model_inputs(graphs: list[ComplexGraph], model):
    coords = [g.node_coords for g in graphs]
    feats = [class_features(g.node_types, g.node_class, model.table_L, model.table_P) for g in graphs]
    return coords, feats, [g.node_class for g in graphs], [g.graph_id for g in graphs]


def batch_log_likelihood(graphs: list[ComplexGraph], model, steps: int = 128, probes: int = 4,
                         probe_kind: str = RADEMACHER, seed: int = 0, batch_size: int = 256,
                         keep_trajectory: bool = True) -> list[TrajectoryRecord]:
    if not graphs:
        raise ValidationError("no graphs to score")
    out = []
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        coords, feats, cls, ids = model_inputs(chunk, model)
        out.extend(integrate_batch(model, coords, feats, cls, ids, steps, probes, probe_kind, seed,
                                   keep_trajectory=keep_trajectory))
    return out


def log_likelihood(graph: ComplexGraph, model, steps: int = 128, probes: int = 4,
                   probe_kind: str = RADEMACHER, seed: int = 0):
    (rec,) = batch_log_likelihood([graph], model, steps, probes, probe_kind, seed)
    return rec.loglik, rec


def pf_drift(state: JointState, t: float, model) -> np.ndarray:
    """alpha(t) (x_t - x0_hat(x_t, t)) for a single graph, shape [n, 3+d]."""
    if not 0.0 < t <= 1.0:
        raise ValidationError("pf_drift needs t in (0, 1]")
    cls = state.node_class if state.node_class is not None else np.zeros(state.n, dtype=np.int64)
    batch = GraphBatch.build([state.n], cls)
    return _Evaluation(model, batch, state.coords, state.feats, t, False).value
