"""Training loop for the joint coordinate/type denoiser.

Each step noises COM-free coordinates and prototype embeddings at a random
level, then minimises the EDM-weighted coordinate error plus the summed
cross-entropy of the cosine logits. Prototype rows are re-normalised after
every update.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from trajood import autodiff as ad
from trajood.batch import GraphBatch
from trajood.denoiser import Denoiser, DenoiserConfig, forward, init_params
from trajood.errors import NumericalError, ValidationError
from trajood.graph import ALPHABET_SIZES, LIGAND, POCKET, ComplexGraph, PrototypeTable
from trajood.schedule import T_EPS, Schedule, loss_weight, sample_time, sigma

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "trajood-ckpt/1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    lambda_coord: float = 1.0
    lambda_ce: float = 1.0
    lambda_geom: float = 0.0
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    clip_norm: float | None = 10.0
    ema_decay: float | None = None
    patience: int | None = None
    time_sampling: str = "uniform"
    t_eps: float = T_EPS
    sigma_min: float = 0.01
    sigma_max: float | None = None
    sigma_data: float | None = None
    eval_every: int = 50
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DenoiserConfig.from_dict(self.model)
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValidationError("learning rate and batch size must be positive")
        if self.lambda_geom < 0 or self.lambda_coord < 0 or self.lambda_ce < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.time_sampling != "uniform":
            raise ValidationError("only uniform time sampling is implemented")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    schedule: Schedule
    model_config: DenoiserConfig
    train_config: TrainConfig
    table_L: PrototypeTable
    table_P: PrototypeTable
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    seed: int = 0
    stats: dict = field(default_factory=dict)

    def denoiser(self) -> Denoiser:
        return Denoiser(self.params, self.table_L, self.table_P, self.schedule, self.model_config)

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "schedule": self.schedule.to_dict(),
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "seed": self.seed,
            "tables": {"L": self.table_L.prototypes.tolist(), "P": self.table_P.prototypes.tolist()},
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            "history": self.history,
            "stats": self.stats,
        }

    def save(self, path) -> str:
        text = json.dumps(self.to_json(), separators=(",", ":"))
        Path(path).write_text(text, encoding="utf-8")
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"checkpoint not found: {path}")
        obj = json.loads(path.read_text(encoding="utf-8"))
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {obj.get('version')!r}")
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["params"].items()}
        return cls(
            schedule=Schedule.from_dict(obj["schedule"]),
            model_config=DenoiserConfig.from_dict(obj["model_config"]),
            train_config=TrainConfig.from_dict(obj["train_config"]),
            table_L=PrototypeTable(np.asarray(obj["tables"]["L"])),
            table_P=PrototypeTable(np.asarray(obj["tables"]["P"])),
            params=params,
            history=obj.get("history", []),
            seed=int(obj.get("seed", 0)),
            stats=obj.get("stats", {}),
        )


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_schedule(graphs: list[ComplexGraph], d: int, sigma_min: float = 0.01,
                     sigma_max: float | None = None, sigma_data: float | None = None,
                     rng: np.random.Generator | None = None) -> Schedule:
    """sigma_max = 10 x median pairwise distance; sigma_data = std of the joint state."""
    if sigma_max is None:
        dists = []
        for g in graphs:
            c = g.node_coords
            diff = c[:, None, :] - c[None, :, :]
            iu = np.triu_indices(g.n, 1)
            dists.append(np.linalg.norm(diff, axis=2)[iu])
        sigma_max = 10.0 * float(np.median(np.concatenate(dists)))
    if sigma_data is None:
        # prototype rows are unit vectors, so each feature entry has second moment 1/d
        coords = np.concatenate([g.node_coords - g.node_coords.mean(axis=0) for g in graphs])
        n = coords.shape[0]
        total = np.sum(coords**2) + n * 1.0
        sigma_data = math.sqrt(total / (n * (3 + d)))
    return Schedule(sigma_min, max(sigma_max, 2 * sigma_min), sigma_data)


@dataclass
class _Batch:
    graphs: list[ComplexGraph]
    batch: GraphBatch
    coords: np.ndarray
    lig_types: np.ndarray
    poc_types: np.ndarray


def _make_batch(graphs: list[ComplexGraph]) -> _Batch:
    b = GraphBatch.from_graphs(graphs)
    types = np.concatenate([g.node_types for g in graphs])
    coords = b.com_project(np.concatenate([g.node_coords for g in graphs]))
    return _Batch(graphs, b, coords, types[b.lig_index], types[b.poc_index])


def _tables_feats(b: _Batch, EL: ad.Var, EP: ad.Var) -> ad.Var:
    lig = ad.take_rows(EL, b.lig_types)
    poc = ad.take_rows(EP, b.poc_types)
    return ad.spmm(b.batch.select_lig.MT, lig) + ad.spmm(b.batch.select_poc.MT, poc)


def _cross_entropy_sum(logits: ad.Var, labels: np.ndarray, graph_of_row: np.ndarray, n_graphs: int):
    """Per-graph summed CE as a Var of shape [B] (via a sparse row-to-graph map)."""
    import scipy.sparse as sp

    lsm = ad.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    per_row = -ad.sum_(lsm * onehot, axis=1, keepdims=True)
    M = sp.csr_matrix((np.ones(len(labels)), (graph_of_row, np.arange(len(labels)))), shape=(n_graphs, len(labels)))
    return ad.spmm(M, per_row)


def loss_terms(params, EL, EP, b: _Batch, schedule: Schedule, cfg: DenoiserConfig, tc: TrainConfig,
               rng: np.random.Generator):
    """Weighted coordinate loss, summed CE and total, as autodiff variables."""
    B = b.batch.n_graphs
    t = sample_time(rng, B, tc.t_eps)
    sig = sigma(schedule, t)
    sig_node = sig[b.batch.graph_index][:, None]
    e0 = _tables_feats(b, EL, EP)
    eps_r = b.batch.com_project(rng.standard_normal(b.coords.shape))
    eps_f = rng.standard_normal(e0.shape)
    r_t = b.coords + sig_node * eps_r
    f_t = e0 + sig_node * eps_f
    out = forward(params, r_t, f_t, sig, b.batch, EL, EP, schedule, cfg)

    gi = b.batch.graph_index
    sq = ad.sum_(ad.square(out.coord_hat - b.coords), axis=1, keepdims=True)
    import scipy.sparse as sp

    counts = 3.0 * b.batch.sizes
    mean_op = sp.csr_matrix((1.0 / counts[gi], (gi, np.arange(len(gi)))), shape=(B, len(gi)))
    mse = ad.spmm(mean_op, sq)  # [B, 1]
    w = loss_weight(schedule, t)[:, None]
    l_coord = ad.sum_(mse * w) * (1.0 / B)

    ce_l = _cross_entropy_sum(out.logits_lig, b.lig_types, gi[b.batch.lig_index], B)
    ce_p = _cross_entropy_sum(out.logits_poc, b.poc_types, gi[b.batch.poc_index], B)
    l_ce = (ad.sum_(ce_l) + ad.sum_(ce_p)) * (1.0 / B)
    total = l_coord * tc.lambda_coord + l_ce * tc.lambda_ce
    if tc.lambda_geom > 0:
        total = total + geometric_regularizer(out, b) * tc.lambda_geom
    return total, l_coord, l_ce


def geometric_regularizer(out, b: _Batch):
    """Hook for optional geometric penalties; contributes nothing by default."""
    return ad.Var(0.0)


class _Optimizer:
    def __init__(self, tc: TrainConfig, shapes: dict[str, tuple]):
        self.tc = tc
        self.state = {k: np.zeros(s) for k, s in shapes.items()}
        self.state2 = {k: np.zeros(s) for k, s in shapes.items()} if tc.optimizer == "adam" else None
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        lr = self.tc.learning_rate
        if self.tc.optimizer == "sgd":
            for k, g in grads.items():
                v = self.state[k] = self.tc.momentum * self.state[k] + g
                values[k] = values[k] - lr * v
            return
        b1, b2 = self.tc.momentum, 0.999
        for k, g in grads.items():
            m = self.state[k] = b1 * self.state[k] + (1 - b1) * g
            s = self.state2[k] = b2 * self.state2[k] + (1 - b2) * g * g
            mh = m / (1 - b1**self.t)
            sh = s / (1 - b2**self.t)
            values[k] = values[k] - lr * mh / (np.sqrt(sh) + 1e-8)


def _renormalize(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class Trainer:
    """Stateful trainer; ``fit`` drives it over epochs."""

    def __init__(self, train: list[ComplexGraph], tc: TrainConfig, schedule: Schedule | None = None):
        if not train:
            raise ValidationError("training set is empty")
        self.tc = tc
        self.cfg = tc.model
        self.rng = np.random.default_rng(tc.seed)
        init_rng = np.random.default_rng([tc.seed, 1])
        self.schedule = schedule or default_schedule(train, self.cfg.d, tc.sigma_min, tc.sigma_max, tc.sigma_data)
        self.values = init_params(self.cfg, init_rng)
        self.values["__EL"] = PrototypeTable.random(ALPHABET_SIZES[LIGAND], self.cfg.d, init_rng).prototypes.copy()
        self.values["__EP"] = PrototypeTable.random(ALPHABET_SIZES[POCKET], self.cfg.d, init_rng).prototypes.copy()
        self.opt = _Optimizer(tc, {k: v.shape for k, v in self.values.items()})
        self.ema = {k: v.copy() for k, v in self.values.items()} if tc.ema_decay else None
        self.steps = 0

    def _split(self, vars_: dict):
        params = {k: v for k, v in vars_.items() if not k.startswith("__")}
        return params, vars_["__EL"], vars_["__EP"]

    def training_step(self, graphs: list[ComplexGraph]) -> tuple[float, float, float]:
        b = _make_batch(graphs)
        leaves = {k: ad.Var(v) for k, v in self.values.items()}
        params, EL, EP = self._split(leaves)
        total, l_coord, l_ce = loss_terms(params, EL, EP, b, self.schedule, self.cfg, self.tc, self.rng)
        if not np.isfinite(total.value):
            raise NumericalError(f"non-finite loss at step {self.steps}: coord={l_coord.value} ce={l_ce.value}")
        names = list(leaves)
        grads = dict(zip(names, ad.grad(total, [leaves[k] for k in names])))
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not np.isfinite(gnorm):
            raise NumericalError(f"non-finite gradient at step {self.steps}")
        if self.tc.clip_norm and gnorm > self.tc.clip_norm:
            scale = self.tc.clip_norm / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        self.opt.step(self.values, grads)
        self.values["__EL"] = _renormalize(self.values["__EL"])
        self.values["__EP"] = _renormalize(self.values["__EP"])
        if self.ema is not None:
            d = self.tc.ema_decay
            for k, v in self.values.items():
                self.ema[k] = d * self.ema[k] + (1 - d) * v
            self.ema["__EL"] = _renormalize(self.ema["__EL"])
            self.ema["__EP"] = _renormalize(self.ema["__EP"])
        self.steps += 1
        return float(total.value), float(l_coord.value), float(l_ce.value)

    def _weights(self) -> dict:
        return self.ema if self.ema is not None else self.values

    def evaluate(self, graphs: list[ComplexGraph], seed: int = 12345, repeats: int = 1) -> dict:
        """Validation loss with a fixed noise stream, so values are comparable across steps."""
        rng = np.random.default_rng(seed)
        tot = coord = ce = 0.0
        count = 0
        w = self._weights()
        for _ in range(repeats):
            for start in range(0, len(graphs), 64):
                chunk = graphs[start:start + 64]
                b = _make_batch(chunk)
                params, EL, EP = self._split(w)
                t_, c_, e_ = loss_terms(params, EL, EP, b, self.schedule, self.cfg, self.tc, rng)
                k = len(chunk)
                tot += float(t_.value) * k
                coord += float(c_.value) * k
                ce += float(e_.value) * k
                count += k
        return {"loss": tot / count, "loss_coord": coord / count, "loss_ce": ce / count}

    def checkpoint(self, history: list[dict], stats: dict) -> Checkpoint:
        w = self._weights()
        params, EL, EP = self._split(w)
        return Checkpoint(
            schedule=self.schedule, model_config=self.cfg, train_config=self.tc,
            table_L=PrototypeTable(_renormalize(EL)), table_P=PrototypeTable(_renormalize(EP)),
            params={k: v.copy() for k, v in params.items()}, history=history, seed=self.tc.seed, stats=stats,
        )


def dataset_stats(graphs: list[ComplexGraph]) -> dict:
    cls = np.concatenate([g.node_class for g in graphs])
    types = np.concatenate([g.node_types for g in graphs])
    lig = np.bincount(types[cls == LIGAND], minlength=ALPHABET_SIZES[LIGAND])
    poc = np.bincount(types[cls == POCKET], minlength=ALPHABET_SIZES[POCKET])
    return {
        "ligand_fraction": float(np.mean(cls == LIGAND)),
        "ligand_type_counts": lig.tolist(),
        "pocket_type_counts": poc.tolist(),
        "node_counts": sorted({int(g.n) for g in graphs}),
    }


def fit(train: list[ComplexGraph], val: list[ComplexGraph], tc: TrainConfig, callback=None) -> Checkpoint:
    if not train or not val:
        raise ValidationError("training and validation sets must be non-empty")
    tr = Trainer(train, tc)
    history = []
    init = tr.evaluate(val)
    history.append({"step": 0, "epoch": 0, **{f"val_{k}": v for k, v in init.items()}})
    log.info("initial validation loss %.6f", init["loss"])
    order_rng = np.random.default_rng([tc.seed, 2])
    best, stale = init["loss"], 0
    done = False
    epoch = 0
    running = []
    while not done and epoch < tc.max_epochs:
        epoch += 1
        perm = order_rng.permutation(len(train))
        for start in range(0, len(perm), tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            running.append(tr.training_step([train[i] for i in idx]))
            if tc.eval_every and tr.steps % tc.eval_every == 0:
                ev = tr.evaluate(val)
                tl = np.mean(running, axis=0)
                running = []
                history.append({"step": tr.steps, "epoch": epoch, "train_loss": float(tl[0]),
                                "train_loss_coord": float(tl[1]), "train_loss_ce": float(tl[2]),
                                **{f"val_{k}": v for k, v in ev.items()}})
                if callback:
                    callback(history[-1])
            if tc.max_steps is not None and tr.steps >= tc.max_steps:
                done = True
                break
        if tc.patience is not None:
            ev = tr.evaluate(val)
            if ev["loss"] < best:
                best, stale = ev["loss"], 0
            else:
                stale += 1
                if stale >= tc.patience:
                    log.info("stopping after %d epochs without improvement", stale)
                    break
    final = tr.evaluate(val)
    if history[-1]["step"] != tr.steps:
        history.append({"step": tr.steps, "epoch": epoch, **{f"val_{k}": v for k, v in final.items()}})
    return tr.checkpoint(history, dataset_stats(train))
