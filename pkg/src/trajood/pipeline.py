"""Stage functions shared by the CLI and the end-to-end pipeline.

A run lives in ``<root>/<timestamp>/`` with ``config.json``, ``manifest.json``
and the ``data/``, ``ckpt/``, ``scores/`` and ``reports/`` subdirectories.
All randomness derives from the single manifest seed through per-stage
streams.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np

from trajood import __version__
from trajood.baselines import DETECTORS, baseline_suite
from trajood.detector import DetectorModel, EvalReport, bootstrap_evaluate, feature_importance, fit_detector
from trajood.errors import NumericalError, ValidationError
from trajood.features import FEATURE_NAMES, feature_matrix, write_feature_csv
from trajood.graph import read_jsonl, write_jsonl
from trajood.likelihood import RADEMACHER, batch_log_likelihood
from trajood.metrics import auroc
from trajood.ratein import StandInRegressor, ratein_profile
from trajood.synthetic import SyntheticFamilySpec, chemical_shift, generate_family, geometric_shift, id_family
from trajood.trainer import Checkpoint, TrainConfig, file_hash, fit

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "id": "id",
        "ood": ["geometric", "chemical"],
        "n_train": 400,
        "n_val": 64,
        "n_eval_id": 200,
        "n_eval_ood": 200,
    },
    "train": {
        "learning_rate": 1e-3, "optimizer": "adam", "batch_size": 16, "max_steps": 500, "max_epochs": 1000,
        "eval_every": 100, "model": {"n_layers": 3, "hidden": 32, "edge_dim": 16, "d": 8},
    },
    "likelihood": {"steps": 64, "probes": 2, "probe_kind": RADEMACHER},
    "detector": {"n_components": 15, "folds": 5, "bootstrap": 100, "split": [0.5, 0.25, 0.25]},
    "baselines": {"enabled": True, "detectors": list(DETECTORS), "standin_steps": 300},
    "ratein": {"enabled": True, "max_graphs": 60},
}

FAMILY_BUILDERS = {"id": id_family, "geometric": geometric_shift, "chemical": chemical_shift}


def stage_seed(seed: int, stage: str) -> int:
    """Counter-free stream key: hash of (seed, stage name) folded to 32 bits."""
    h = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    return merge_config(DEFAULT_CONFIG, user)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def family_spec(entry, seed: int, name: str | None = None) -> SyntheticFamilySpec:
    """A family entry is a builder name ("id", "geometric", "chemical") or a full spec dict."""
    if isinstance(entry, str):
        if entry not in FAMILY_BUILDERS:
            raise ValidationError(f"unknown family {entry!r}; choose from {sorted(FAMILY_BUILDERS)}")
        return FAMILY_BUILDERS[entry](seed=seed, name=name or entry)
    d = dict(entry)
    d["seed"] = seed
    if name is not None:
        d["name"] = name
    return SyntheticFamilySpec.from_dict(d)


def split_indices(n: int, fractions, seed: int) -> list[np.ndarray]:
    if n < len(fractions):
        raise ValidationError(f"cannot split {n} rows into {len(fractions)} parts")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.floor(np.cumsum(fractions)[:-1] / np.sum(fractions) * n).astype(int)
    return [np.sort(p) for p in np.split(perm, cuts)]


# stage helpers used by the CLI verbs

def likelihood_records(graphs, ckpt: Checkpoint, steps: int, probes: int, probe_kind: str, seed: int):
    return batch_log_likelihood(graphs, ckpt.denoiser(), steps=steps, probes=probes, probe_kind=probe_kind,
                                seed=seed)


def write_loglik_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "loglik", "log_p1", "n_nodes", "steps", "probes", "probe_kind"])
        for r in records:
            w.writerow([r.graph_id, repr(float(r.loglik)), repr(float(r.log_p1)), r.n, len(r.times) - 1,
                        r.n_probes, r.probe_kind])


def feature_metadata(ckpt_hash: str, steps: int, probes: int, probe_kind: str, seed: int) -> dict:
    return {"T": steps, "m": probes, "probe_kind": probe_kind, "seed": seed, "checkpoint_sha256": ckpt_hash,
            "features": list(FEATURE_NAMES), "version": __version__}


def write_scores_csv(path, ids, model: DetectorModel, X, prefix_cols=None) -> None:
    L, S, dec, pct, levels = model.decide(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        pre = list(prefix_cols or {})
        w.writerow([*pre, "id", "L", "S", "decision", "percentile", "risk_level"])
        for i, gid in enumerate(ids):
            w.writerow([*(prefix_cols[k][i] for k in pre), gid, repr(float(L[i])), repr(float(S[i])),
                        "OOD" if dec[i] else "ID", repr(float(pct[i])), levels[i]])


def write_report(path, report: EvalReport, extra: dict | None = None) -> None:
    body = {**report.summary(), **(extra or {})}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True), encoding="utf-8")
    draws_path = Path(path).with_suffix(".draws.csv")
    cols = list(report.draws[0]) if report.draws else []
    with open(draws_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for d in report.draws:
            w.writerow([repr(float(d[c])) if isinstance(d[c], float) else d[c] for c in cols])


# end-to-end run

def _new_run_dir(root: Path) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / stamp
    k = 1
    while d.exists():
        d = root / f"{stamp}-{k}"
        k += 1
    return d


class _Stage:
    def __init__(self, name: str, manifest: dict):
        self.name, self.manifest = name, manifest

    def __enter__(self):
        log.info("stage %s", self.name)
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.manifest.setdefault("stages", []).append(self.name)
            log.info("stage %s done in %.1fs", self.name, time.perf_counter() - self.t0)
            return False
        if isinstance(exc, (ValidationError, NumericalError)):
            raise type(exc)(f"stage {self.name!r} failed: {exc}") from exc
        if isinstance(exc, (OSError, KeyError, TypeError)):
            raise ValidationError(f"stage {self.name!r} failed: {exc}") from exc
        return False


def run_pipeline(cfg: dict, root="run", run_dir=None) -> Path:
    """generate -> train -> likelihood + features -> fit-ood -> eval (+ baselines, Rate-In)."""
    cfg = merge_config(DEFAULT_CONFIG, cfg)
    seed = int(cfg["seed"])
    out = Path(run_dir) if run_dir is not None else _new_run_dir(Path(root))
    for sub in ("data", "ckpt", "scores", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True), encoding="utf-8")
    seeds = {s: stage_seed(seed, s) for s in ("generate", "train", "likelihood", "detector", "baselines", "ratein")}
    manifest = {"config_sha256": config_hash(cfg), "seed": seed, "stage_seeds": seeds,
                "versions": {"trajood": __version__, "numpy": np.__version__, "python": platform.python_version()}}

    def write_manifest():
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    write_manifest()
    dc = cfg["data"]
    try:
        with _Stage("generate", manifest):
            gs = seeds["generate"]
            sets = {
                "train": generate_family(family_spec(dc["id"], gs, "train"), dc["n_train"]),
                "val": generate_family(family_spec(dc["id"], gs + 1, "val"), dc["n_val"]),
                "id_eval": generate_family(family_spec(dc["id"], gs + 2, "id-eval"), dc["n_eval_id"]),
            }
            for i, entry in enumerate(dc["ood"]):
                name = entry if isinstance(entry, str) else entry.get("name", f"ood{i}")
                sets[f"ood_{name}"] = generate_family(family_spec(entry, gs + 10 + i, f"ood-{name}"),
                                                      dc["n_eval_ood"])
            for k, g in sets.items():
                write_jsonl(g, out / "data" / f"{k}.jsonl")

        with _Stage("train", manifest):
            tc = TrainConfig.from_dict({**cfg["train"], "seed": seeds["train"]})
            ckpt = fit(sets["train"], sets["val"], tc)
            manifest["checkpoint_sha256"] = ckpt.save(out / "ckpt" / "model.json")
            write_manifest()

        lc = cfg["likelihood"]
        feats = {}
        with _Stage("likelihood", manifest):
            meta = feature_metadata(manifest["checkpoint_sha256"], lc["steps"], lc["probes"], lc["probe_kind"],
                                    seeds["likelihood"])
            for k, g in sets.items():
                if k in ("train", "val"):
                    continue
                recs = likelihood_records(g, ckpt, lc["steps"], lc["probes"], lc["probe_kind"], seeds["likelihood"])
                X, names = feature_matrix(recs)
                ids = [r.graph_id for r in recs]
                write_loglik_csv(out / "scores" / f"{k}.loglik.csv", recs)
                write_feature_csv(out / "data" / f"{k}.features.csv", ids, X, names, meta)
                feats[k] = (ids, X)

        dcfg = cfg["detector"]
        summary = {}
        with _Stage("detector", manifest):
            ids_id, X_id = feats["id_eval"]
            score_rows = {"ood_set": [], "id": [], "X": []}
            for k in [k for k in feats if k.startswith("ood_")]:
                ids_ood, X_ood = feats[k]
                ds = seeds["detector"]
                ia = split_indices(len(X_id), dcfg["split"], ds)
                ib = split_indices(len(X_ood), dcfg["split"], ds + 1)
                model = fit_detector(X_id[ia[0]], X_ood[ib[0]], X_id[ia[1]], X_ood[ib[1]], FEATURE_NAMES,
                                     dcfg["n_components"], dcfg["folds"], ds)
                model.save(out / "ckpt" / f"detector_{k}.bin")
                rep = bootstrap_evaluate(model, X_id[ia[2]], X_ood[ib[2]], dcfg["bootstrap"], seed=ds)
                ll = [0]
                model_ll = fit_detector(X_id[ia[0]][:, ll], X_ood[ib[0]][:, ll], X_id[ia[1]][:, ll],
                                        X_ood[ib[1]][:, ll], ["log_likelihood"], 1, dcfg["folds"], ds)
                rep_ll = bootstrap_evaluate(model_ll, X_id[ia[2]][:, ll], X_ood[ib[2]][:, ll], dcfg["bootstrap"], seed=ds)
                # raw -loglik as the score, no density model
                y_te = np.r_[np.zeros(len(ia[2])), np.ones(len(ib[2]))]
                raw_ll = auroc(-np.r_[X_id[ia[2], 0], X_ood[ib[2], 0]], y_te)
                imp = feature_importance(X_id, X_ood, FEATURE_NAMES, seed=ds)
                write_report(out / "reports" / f"eval_{k}.json", rep,
                             {"loglik_only": rep_ll.summary(), "loglik_raw_auroc": raw_ll,
                              "threshold": model.threshold, "importance": [list(r) for r in imp]})
                summary[k] = {"auroc": rep.mean("auroc"), "auroc_loglik_only": rep_ll.mean("auroc"),
                              "auroc_loglik_raw": raw_ll}
                test_ids = [ids_id[i] for i in ia[2]] + [ids_ood[i] for i in ib[2]]
                score_rows["ood_set"] += [k[4:]] * len(test_ids)
                score_rows["id"] += test_ids
                score_rows["X"].append((model, np.vstack([X_id[ia[2]], X_ood[ib[2]]])))
            _write_combined_scores(out / "scores" / "scores.csv", score_rows)

        bcfg = cfg["baselines"]
        if bcfg.get("enabled", True) or cfg["ratein"].get("enabled", True):
            with _Stage("standin", manifest):
                standin = StandInRegressor.init(seed=seeds["baselines"])
                standin.fit(sets["train"], steps=bcfg.get("standin_steps", 300), seed=seeds["baselines"])
                standin.save(out / "ckpt" / "standin.json")
        if bcfg.get("enabled", True):
            with _Stage("baselines", manifest):
                E_tr = standin.embed(sets["train"])
                E_id = standin.embed(sets["id_eval"])
                for k in [k for k in sets if k.startswith("ood_")]:
                    E_ood = standin.embed(sets[k])
                    bs = seeds["baselines"]
                    ia = split_indices(len(E_id), [0.5, 0.5], bs)
                    ib = split_indices(len(E_ood), [0.5, 0.5], bs + 1)
                    reps = baseline_suite(E_tr, E_id[ia[0]], E_ood[ib[0]], E_id[ia[1]], E_ood[ib[1]],
                                          bcfg["detectors"], dcfg["bootstrap"], bs)
                    body = {n: reps[n].summary() for n in bcfg["detectors"]}
                    body["best"] = reps["best"]
                    (out / "reports" / f"baselines_{k}.json").write_text(json.dumps(body, indent=2, sort_keys=True),
                                                                        encoding="utf-8")
                    summary.setdefault(k, {})["baseline_best_auroc"] = reps[reps["best"]].mean("auroc")
        if cfg["ratein"].get("enabled", True):
            with _Stage("ratein", manifest):
                cap = cfg["ratein"].get("max_graphs", 60)
                rows = []
                for k in ["id_eval", *[k for k in sets if k.startswith("ood_")]]:
                    for g in sets[k][:cap]:
                        p = ratein_profile(standin, g, seed=seeds["ratein"])
                        rows.append((k, p))
                write_ratein_csv(out / "scores" / "ratein.csv", rows)
        (out / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    finally:
        write_manifest()
    return out


def _write_combined_scores(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ood_set", "id", "L", "S", "decision", "percentile", "risk_level"])
        i = 0
        for model, X in rows["X"]:
            L, S, dec, pct, levels = model.decide(X)
            for j in range(len(X)):
                w.writerow([rows["ood_set"][i], rows["id"][i], repr(float(L[j])), repr(float(S[j])),
                            "OOD" if dec[j] else "ID", repr(float(pct[j])), levels[j]])
                i += 1


def write_ratein_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "id", "score", "sigma2_pred", "rate_var", "mean_iters", "converged", "rates"])
        for k, p in rows:
            w.writerow([k, p.graph_id, repr(p.score), repr(p.sigma2_pred), repr(float(np.var(p.rates))),
                        repr(float(np.mean(p.n_iters))), int(p.all_converged),
                        ";".join(repr(float(r)) for r in p.rates)])


def read_graphs(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"data file not found: {path}")
    return read_jsonl(path)


__all__ = ["DEFAULT_CONFIG", "config_hash", "family_spec", "feature_metadata", "file_hash", "likelihood_records",
           "load_config", "merge_config", "read_graphs", "run_pipeline", "split_indices", "stage_seed",
           "write_loglik_csv", "write_ratein_csv", "write_report", "write_scores_csv"]
