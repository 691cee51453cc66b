"""Rate-In: per-sample, per-layer dropout rates tuned to a target information loss.

Ships a small stand-in graph regressor (two message-passing rounds, six
residual blocks with dropout on the branch) so the protocol runs end to end.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from trajood import autodiff as ad
from trajood.batch import SparseOp
from trajood.errors import ValidationError
from trajood.graph import ALPHABET_SIZES, LIGAND, ComplexGraph
from trajood.likelihood import graph_stream

N_SITES = 6
EPS_TARGET = 0.1
TOL = 0.02
N_MAX = 20
P_INIT = 0.3
P_MAX = 0.9
K_MASKS = 5
M_PRED = 30
LAMBDA1 = 0.3
LAMBDA2 = 0.2

log = logging.getLogger(__name__)


def ratein_mi(h_in, h_out) -> float:
    """Gaussian MI proxy -1/2 ln(1 - rho^2) from the Pearson correlation of the flattened arrays."""
    a = np.asarray(h_in, dtype=np.float64).ravel()
    b = np.asarray(h_out, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValidationError("MI proxy needs equal element counts")
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        log.debug("constant activation; MI proxy set to 0")
        return 0.0
    rho2 = min((np.dot(a, b) / den) ** 2, 1.0 - 1e-15)
    return float(-0.5 * np.log1p(-rho2))


@dataclass
class LayerResult:
    p: float
    n_iter: int
    converged: bool
    skipped: bool = False


def optimize_rate(site_fn, rng, eps: float = EPS_TARGET, tol: float = TOL, n_max: int = N_MAX,
                  p_init: float = P_INIT, k: int = K_MASKS) -> LayerResult:
    """Multiplicative search for the dropout rate whose relative MI loss is within tol of eps.

    ``site_fn(p, rng)`` returns (h_in, h_out) of one dropout site with rate p
    and dropout disabled elsewhere.
    """
    i_full = ratein_mi(*site_fn(0.0, rng))
    if i_full <= 1e-12:
        return LayerResult(0.0, 0, False, skipped=True)
    p = p_init
    for it in range(1, n_max + 1):
        i_p = float(np.mean([ratein_mi(*site_fn(p, rng)) for _ in range(k)]))
        loss = (i_full - i_p) / i_full
        if abs(loss - eps) <= tol:
            return LayerResult(p, it, True)
        if it == n_max:
            break
        p = 0.9 * p if loss > eps else min(1.1 * p, P_MAX)
    return LayerResult(p, n_max, False)


def ratein_score(sigma2_pred: float, rates, n_iters, lam1: float = LAMBDA1, lam2: float = LAMBDA2,
                 n_max: int = N_MAX) -> float:
    """sigma2_pred + lam1 * Var(p*) + lam2 * mean(n) / n_max."""
    rates = np.asarray(rates, dtype=np.float64)
    n_bar = float(np.mean(n_iters)) if len(n_iters) else 0.0
    var = float(np.var(rates)) if rates.size else 0.0
    return float(sigma2_pred + lam1 * var + lam2 * n_bar / n_max)


@dataclass
class RateInProfile:
    graph_id: str
    rates: list
    n_iters: list
    converged: list
    skipped: list
    sigma2_pred: float
    score: float

    @property
    def all_converged(self) -> bool:
        return all(c or s for c, s in zip(self.converged, self.skipped))

    def to_dict(self) -> dict:
        return {"id": self.graph_id, "rates": self.rates, "n_iters": self.n_iters, "converged": self.converged,
                "skipped": self.skipped, "sigma2_pred": self.sigma2_pred, "score": self.score}


# stand-in regressor

def _silu(x):
    return x / (1.0 + np.exp(-np.clip(x, -500, 500)))


@dataclass
class GraphInputs:
    x: np.ndarray  # N x (V_L + V_P) one-hot
    A: SparseOp  # block-diagonal row-normalized Gaussian-kernel adjacency
    P: SparseOp  # B x N mean pooling
    sizes: np.ndarray

    @classmethod
    def build(cls, graphs: list[ComplexGraph], width: float = 2.0) -> "GraphInputs":
        VL, VP = ALPHABET_SIZES
        xs, blocks, rows, cols = [], [], [], []
        offset = 0
        for b, g in enumerate(graphs):
            onehot = np.zeros((g.n, VL + VP))
            col = np.where(g.node_class == LIGAND, g.node_types, VL + g.node_types)
            onehot[np.arange(g.n), col] = 1.0
            xs.append(onehot)
            d2 = np.sum((g.node_coords[:, None] - g.node_coords[None]) ** 2, axis=2)
            K = np.exp(-d2 / (2 * width**2))
            blocks.append(K / K.sum(axis=1, keepdims=True))
            rows.extend([b] * g.n)
            cols.extend(range(offset, offset + g.n))
            offset += g.n
        sizes = np.array([g.n for g in graphs])
        pool = sp.csr_matrix((1.0 / np.repeat(sizes, sizes), (rows, cols)), shape=(len(graphs), offset))
        return cls(np.vstack(xs), SparseOp.of(sp.block_diag(blocks, format="csr")), SparseOp.of(pool), sizes)


def standin_target(g: ComplexGraph) -> float:
    """Synthetic scalar label: polar ligand fraction plus a ligand-pocket distance term."""
    lig = g.node_class == LIGAND
    polar = float(np.mean(np.isin(g.node_types[lig], [1, 2]))) if lig.any() else 0.0
    if lig.any() and (~lig).any():
        dist = np.linalg.norm(g.node_coords[lig][:, None] - g.node_coords[~lig][None], axis=2).mean()
    else:
        dist = 0.0
    return polar + 0.2 * float(dist)


@dataclass
class StandInRegressor:
    params: dict
    hidden: int = 32
    y_mean: float = 0.0
    y_std: float = 1.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, hidden: int = 32, seed: int = 0) -> "StandInRegressor":
        rng = np.random.default_rng(seed)
        F = sum(ALPHABET_SIZES)
        p = {"W_e": rng.standard_normal((F, hidden)) / np.sqrt(F), "b_e": np.zeros(hidden)}
        for s in range(N_SITES):
            p[f"W{s}"] = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
            p[f"b{s}"] = np.zeros(hidden)
        p["w_o"] = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
        p["b_o"] = np.zeros(1)
        return cls(p, hidden)

    def _forward(self, params, inp: GraphInputs, rates, rng, diff: bool, stop_at: int | None = None):
        """Returns (y, sites) with sites a list of (h_in, h_out); ``diff`` selects autodiff ops."""
        silu = ad.silu if diff else _silu
        agg = (lambda S, h: ad.spmm(S, h)) if diff else (lambda S, h: S.M @ h)
        sites = []

        def block(s, h):
            branch = silu(h @ params[f"W{s}"] + params[f"b{s}"])
            p = rates[s]
            if p > 0:
                mask = (rng.random(np.shape(branch.value if diff else branch)) >= p) / (1.0 - p)
                branch = branch * mask
            out = h + branch
            sites.append((h, out))
            return out

        h = inp.x @ params["W_e"] + params["b_e"]
        h = block(0, h)
        h = block(1, agg(inp.A, h))
        h = block(2, h)
        if stop_at is not None and stop_at < 3:
            return None, sites
        h = block(3, agg(inp.A, h))
        g = agg(inp.P, h)
        g = block(4, g)
        g = block(5, g)
        y = g @ params["w_o"] + params["b_o"]
        return y, sites

    def predict(self, inp: GraphInputs, rates=None, rng=None) -> np.ndarray:
        rates = [0.0] * N_SITES if rates is None else rates
        y, _ = self._forward(self.params, inp, rates, rng, diff=False)
        return self.y_mean + self.y_std * y[:, 0]

    def embed(self, graphs: list[ComplexGraph]) -> np.ndarray:
        """Pooled graph representation after the last block, dropout off."""
        inp = GraphInputs.build(graphs)
        _, sites = self._forward(self.params, inp, [0.0] * N_SITES, None, diff=False)
        return sites[-1][1]

    def site(self, inp: GraphInputs, layer: int, p: float, rng):
        rates = [0.0] * N_SITES
        rates[layer] = p
        _, sites = self._forward(self.params, inp, rates, rng, diff=False, stop_at=layer)
        return sites[layer]

    def fit(self, graphs: list[ComplexGraph], steps: int = 300, lr: float = 3e-3, batch_size: int = 32,
            train_rate: float = 0.1, seed: int = 0) -> list[float]:
        """Adam on mean-squared error of the standardized target with dropout active at every site."""
        rng = np.random.default_rng(seed)
        y = np.array([standin_target(g) for g in graphs])
        self.y_mean, self.y_std = float(y.mean()), float(y.std() or 1.0)
        z = (y - self.y_mean) / self.y_std
        m = {k: np.zeros_like(v) for k, v in self.params.items()}
        v2 = {k: np.zeros_like(v) for k, v in self.params.items()}
        losses = []
        for t in range(1, steps + 1):
            idx = rng.choice(len(graphs), size=min(batch_size, len(graphs)), replace=False)
            inp = GraphInputs.build([graphs[i] for i in idx])
            pv = {k: ad.Var(v) for k, v in self.params.items()}
            out, _ = self._forward(pv, inp, [train_rate] * N_SITES, rng, diff=True)
            err = out - z[idx][:, None]
            loss = ad.sum_(ad.square(err)) / len(idx)
            keys = list(pv)
            grads = ad.grad(loss, [pv[k] for k in keys])
            for k, g in zip(keys, grads):
                m[k] = 0.9 * m[k] + 0.1 * g
                v2[k] = 0.999 * v2[k] + 0.001 * g * g
                self.params[k] = self.params[k] - lr * (m[k] / (1 - 0.9**t)) / (np.sqrt(v2[k] / (1 - 0.999**t)) + 1e-8)
            losses.append(float(loss.value))
        self.meta = {"steps": steps, "lr": lr, "train_rate": train_rate, "seed": seed, "final_loss": losses[-1]}
        return losses

    def save(self, path) -> None:
        doc = {"hidden": self.hidden, "y_mean": self.y_mean, "y_std": self.y_std, "meta": self.meta,
               "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()}}
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "StandInRegressor":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"stand-in model not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        return cls(params, doc["hidden"], doc["y_mean"], doc["y_std"], doc.get("meta", {}))


def ratein_profile(model: StandInRegressor, graph: ComplexGraph, seed: int = 0, m_pred: int = M_PRED,
                   **kw) -> RateInProfile:
    """Optimize every site with the others disabled, then score M MC-dropout predictions at p*."""
    rng = graph_stream(seed, graph.graph_id)
    inp = GraphInputs.build([graph])
    results = [optimize_rate(lambda p, r, l=l: model.site(inp, l, p, r), rng, **kw) for l in range(N_SITES)]
    rates = [r.p for r in results]
    preds = np.array([model.predict(inp, rates, rng)[0] for _ in range(m_pred)])
    s2 = float(np.var(preds))
    n_iters = [r.n_iter for r in results]
    score = ratein_score(s2, rates, n_iters, n_max=kw.get("n_max", N_MAX))
    return RateInProfile(graph.graph_id, rates, n_iters, [r.converged for r in results],
                         [r.skipped for r in results], s2, score)
