"""E(3)-equivariant graph denoiser with coordinate and type heads.

The network acts on a flattened ``GraphBatch``. Coordinates enter scaled by
``c_in``; the coordinate head returns an equivariant displacement that is
combined with the noisy input through the EDM skip/output weights. The type
head produces a unit direction per node which is scored against the prototype
table of the node's own class with cosine logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from trajood import autodiff as ad
from trajood.batch import GraphBatch
from trajood.errors import NumericalError, ValidationError
from trajood.graph import ALPHABET_SIZES, LIGAND, PrototypeTable
from trajood.schedule import Schedule, precondition, sigma, skip_scale

THEORY = "theory"
FIXED = "fixed"


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 6
    hidden: int = 256
    edge_dim: int = 64
    d: int = 256
    n_fourier: int = 8
    temperature: str = THEORY

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _layer_names(l: int) -> list[str]:
    return [f"l{l}.{k}" for k in ("Wa", "Wb", "wd", "We", "b1", "W2", "b2",
                                  "Wc1", "bc1", "wc2", "Wn1", "bn1", "Wn2", "bn2")]


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    H, m, d = cfg.hidden, cfg.edge_dim, cfg.d

    def dense(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))

    p = {
        "W_in": dense(d + 2 + cfg.n_fourier, H),
        "b_in": np.zeros((1, H)),
        "we": dense(1, m),
        "be": rng.uniform(-1.0, 1.0, (1, m)),
    }
    for l in range(cfg.n_layers):
        a, b, wd, We, b1, W2, b2, Wc1, bc1, wc2, Wn1, bn1, Wn2, bn2 = _layer_names(l)
        # the first edge layer is split by input block; scale by the joint fan-in
        fan = 2 * H + 1 + m
        p[a] = dense(fan, H)[:H]
        p[b] = dense(fan, H)[:H]
        p[wd] = dense(fan, H)[:1]
        p[We] = dense(fan, H)[:m]
        p[b1] = np.zeros((1, H))
        p[W2] = dense(H, H)
        p[b2] = np.zeros((1, H))
        p[Wc1] = dense(H, H)
        p[bc1] = np.zeros((1, H))
        p[wc2] = dense(H, 1, gain=1e-3)
        p[Wn1] = dense(2 * H, H)
        p[bn1] = np.zeros((1, H))
        p[Wn2] = dense(H, H, gain=0.5)
        p[bn2] = np.zeros((1, H))
    p["W_f"] = dense(H, d, gain=0.5)
    p["b_f"] = np.zeros((1, d))
    return p


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(cfg, np.random.default_rng(0)).items()}


def fourier_features(log_sigma: np.ndarray, n: int) -> np.ndarray:
    freqs = 2.0 ** np.arange(n // 2)
    arg = np.outer(log_sigma / 4.0, freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def kappa(sig, mode: str):
    if mode == THEORY:
        return 1.0 / np.square(sig)
    if mode == FIXED:
        return np.ones_like(np.asarray(sig, dtype=np.float64))
    raise ValidationError(f"unknown temperature mode {mode!r}")


def cosine_logits(feat_dir, table, kap):
    """z_ik = kappa_i <e_k, h_i>; works on arrays or autodiff variables."""
    kap = np.asarray(kap, dtype=np.float64).reshape(-1, 1)
    if isinstance(feat_dir, ad.Var) or isinstance(table, ad.Var):
        E = ad.as_var(table)
        return ad.mul(ad.matmul(feat_dir, _transpose(E)), kap)
    E = table.prototypes if isinstance(table, PrototypeTable) else np.asarray(table)
    return kap * (np.asarray(feat_dir) @ E.T)


def _transpose(E: ad.Var) -> ad.Var:
    return ad.Var(E.value.T, ((E, lambda g: g.T),))


def posterior_mean_embedding(logits, table):
    """Softmax-weighted mixture of prototype rows."""
    if isinstance(logits, ad.Var) or isinstance(table, ad.Var):
        return ad.matmul(ad.softmax(logits, axis=1), ad.as_var(table))
    E = table.prototypes if isinstance(table, PrototypeTable) else np.asarray(table)
    z = np.asarray(logits, dtype=np.float64)
    w = np.exp(z - z.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return w @ E


def interpolated_score(x_t: np.ndarray, x0_hat: np.ndarray, sig: float, n_coord: int = 3) -> np.ndarray:
    """(x0_hat - x_t) / sigma^2 with a COM-free coordinate block."""
    if not sig > 0:
        raise ValidationError("sigma must be positive")
    s = (np.asarray(x0_hat) - np.asarray(x_t)) / sig**2
    s[:, :n_coord] -= s[:, :n_coord].mean(axis=0, keepdims=True)
    return s


@dataclass
class DenoiserOutput:
    """Outputs for a batch; arrays or autodiff variables over stacked nodes."""

    coord_hat: object  # N x 3, COM-free per graph
    feat_dir: object  # N x d, unit rows
    logits_lig: object  # N_L x V_L
    logits_poc: object  # N_P x V_P
    x0_feat: object  # N x d posterior-mean embedding
    com_raw: object  # B x 3 mean coordinate displacement before projection

    def logits(self, batch: GraphBatch) -> list[np.ndarray]:
        """Per-node logit rows (ragged over class alphabets)."""
        zl, zp = _val(self.logits_lig), _val(self.logits_poc)
        out, il, ip = [], 0, 0
        for c in batch.node_class:
            if c == LIGAND:
                out.append(zl[il]); il += 1
            else:
                out.append(zp[ip]); ip += 1
        return out


def _val(x):
    return x.value if isinstance(x, ad.Var) else x


def _check(x: ad.Var, where: str):
    if not np.all(np.isfinite(x.value)):
        raise NumericalError(f"non-finite activations in {where}")


def forward(params, coords, feats, sig_graph, batch: GraphBatch, table_L, table_P,
            schedule: Schedule, cfg: DenoiserConfig) -> DenoiserOutput:
    """Denoiser forward pass on stacked nodes.

    ``params`` maps names to arrays or ``Var`` leaves; ``coords``/``feats`` and
    the tables may be ``Var`` leaves when derivatives are needed. ``sig_graph``
    holds one noise level per graph.
    """
    P = {k: ad.as_var(v) for k, v in params.items()}
    coords, feats = ad.as_var(coords), ad.as_var(feats)
    EL, EP = ad.as_var(_table(table_L)), ad.as_var(_table(table_P))
    sig_graph = np.asarray(sig_graph, dtype=np.float64).reshape(-1)
    sig = sig_graph[batch.graph_index]
    t_node = np.log(sig / schedule.sigma_min) / schedule.log_ratio
    c_in, c_out = precondition(schedule, np.clip(t_node, 0.0, 1.0))
    c_skip = skip_scale(schedule, np.clip(t_node, 0.0, 1.0))
    c_in, c_out, c_skip = c_in[:, None], c_out[:, None], c_skip[:, None]

    x = coords * c_in
    onehot = np.zeros((batch.n_nodes, 2))
    onehot[np.arange(batch.n_nodes), (batch.node_class != LIGAND).astype(int)] = 1.0
    cond = np.concatenate([onehot, fourier_features(np.log(sig), cfg.n_fourier)], axis=1)
    h = ad.matmul(ad.concat([feats * c_in, cond], axis=1), P["W_in"]) + P["b_in"]

    diff0 = ad.spmm(batch.edge_diff, x)
    dist0 = ad.sqrt(ad.sum_(ad.square(diff0), axis=1, keepdims=True) + 1e-8)
    edge_emb = ad.silu(ad.matmul(dist0, P["we"]) + P["be"])
    x_cur = x
    for l in range(cfg.n_layers):
        Wa, Wb, wd, We, b1, W2, b2, Wc1, bc1, wc2, Wn1, bn1, Wn2, bn2 = (P[k] for k in _layer_names(l))
        diff = ad.spmm(batch.edge_diff, x_cur)
        dist = ad.sqrt(ad.sum_(ad.square(diff), axis=1, keepdims=True) + 1e-8)
        pre = (ad.spmm(batch.gather_recv, ad.matmul(h, Wa)) + ad.spmm(batch.gather_send, ad.matmul(h, Wb))
               + ad.matmul(dist, wd) + ad.matmul(edge_emb, We) + b1)
        msg = ad.silu(ad.matmul(ad.silu(pre), W2) + b2)
        gate = ad.matmul(ad.silu(ad.matmul(msg, Wc1) + bc1), wc2)
        trans = diff * (gate / (dist + 1.0))
        x_cur = x_cur + ad.spmm(batch.aggregate, trans)
        agg = ad.spmm(batch.aggregate, msg)
        h = h + ad.matmul(ad.silu(ad.matmul(ad.concat([h, agg], axis=1), Wn1) + bn1), Wn2) + bn2
        _check(h, f"layer {l}")
        _check(x_cur, f"layer {l}")

    disp = x_cur - x
    com_raw = ad.spmm(batch.graph_mean, disp)
    disp = disp - ad.spmm(batch.node_mean, disp)
    coord_hat = coords * c_skip + disp * c_out
    coord_hat = coord_hat - ad.spmm(batch.node_mean, coord_hat)

    g = ad.matmul(h, P["W_f"]) + P["b_f"] + feats * c_skip
    feat_dir = ad.normalize_rows(g)
    kap = kappa(sig, cfg.temperature)
    zl = cosine_logits(ad.spmm(batch.select_lig, feat_dir), EL, kap[batch.lig_index])
    zp = cosine_logits(ad.spmm(batch.select_poc, feat_dir), EP, kap[batch.poc_index])
    x0_feat = (ad.spmm(batch.select_lig.MT, posterior_mean_embedding(zl, EL))
               + ad.spmm(batch.select_poc.MT, posterior_mean_embedding(zp, EP)))
    _check(coord_hat, "coordinate head")
    _check(x0_feat, "type head")
    return DenoiserOutput(coord_hat, feat_dir, zl, zp, x0_feat, com_raw)


def _table(t):
    if isinstance(t, PrototypeTable):
        return t.prototypes
    return t


class Denoiser:
    """Bundles parameters, prototype tables, schedule and architecture."""

    def __init__(self, params, table_L: PrototypeTable, table_P: PrototypeTable,
                 schedule: Schedule, cfg: DenoiserConfig):
        if table_L.d != cfg.d or table_P.d != cfg.d:
            raise ValidationError("prototype width must equal the configured d")
        if table_L.V != ALPHABET_SIZES[0] or table_P.V != ALPHABET_SIZES[1]:
            raise ValidationError("prototype tables do not match the alphabets")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.table_L, self.table_P = table_L, table_P
        self.schedule, self.cfg = schedule, cfg

    def __call__(self, coords, feats, sig_graph, batch: GraphBatch) -> DenoiserOutput:
        return forward(self.params, coords, feats, sig_graph, batch, self.table_L, self.table_P,
                       self.schedule, self.cfg)

    def x0(self, coords, feats, sig_graph, batch: GraphBatch):
        """Clean-state estimate used by the ODE/SDE solvers.

        Returns the coordinate estimate, the posterior-mean embedding and the
        per-graph centroid of the coordinate estimate before projection.
        """
        out = self(coords, feats, sig_graph, batch)
        t = np.log(np.asarray(sig_graph) / self.schedule.sigma_min) / self.schedule.log_ratio
        _, c_out = precondition(self.schedule, np.clip(t, 0.0, 1.0))
        return out.coord_hat, out.x0_feat, c_out[:, None] * _val(out.com_raw)

    def at_time(self, coords, feats, t, batch: GraphBatch) -> DenoiserOutput:
        sig = np.broadcast_to(sigma(self.schedule, t), (batch.n_graphs,))
        return self(coords, feats, sig, batch)
