"""Command-line entry point. Exit codes: 0 success, 2 validation error, 3 numerical failure."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from trajood.baselines import DETECTORS, baseline_suite
from trajood.detector import DetectorModel, bootstrap_evaluate, fit_detector
from trajood.errors import NumericalError, ValidationError
from trajood.features import feature_matrix, read_feature_csv, write_feature_csv
from trajood.graph import write_jsonl
from trajood.likelihood import EXACT, GAUSSIAN, RADEMACHER, TrajectoryRecord
from trajood.pipeline import (family_spec, feature_metadata, likelihood_records, load_config, read_graphs,
                              run_pipeline, split_indices, write_loglik_csv, write_ratein_csv, write_report,
                              write_scores_csv)
from trajood.ratein import StandInRegressor, ratein_profile
from trajood.sampler import fragment_stats, sample_batch
from trajood.synthetic import SyntheticFamilySpec, chemical_shift, generate_family
from trajood.trainer import Checkpoint, TrainConfig, file_hash, fit

log = logging.getLogger("trajood")


def _json_arg(path):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from exc


def cmd_generate(a):
    if a.spec:
        spec = SyntheticFamilySpec.from_dict({**_json_arg(a.spec), "seed": a.seed})
    elif a.family == "chemical" and a.lam is not None:
        spec = chemical_shift(seed=a.seed, lam=a.lam, name=a.name or "chemical")
    else:
        spec = family_spec(a.family, a.seed, a.name)
    write_jsonl(generate_family(spec, a.count), a.out)


def cmd_train(a):
    tc = TrainConfig.from_dict(_json_arg(a.config)) if a.config else TrainConfig()
    if a.steps is not None:
        tc.max_steps = a.steps
    if a.seed is not None:
        tc.seed = a.seed
    ck = fit(read_graphs(a.train), read_graphs(a.val), tc)
    digest = ck.save(a.out)
    print(json.dumps({"checkpoint": str(a.out), "sha256": digest, "final": ck.history[-1]}))


def cmd_sample(a):
    ck = Checkpoint.load(a.ckpt)
    n_lig = a.ligand_nodes if a.ligand_nodes is not None else int(round(ck.stats.get("ligand_fraction", 0.6) * a.nodes))
    if not 1 <= n_lig <= a.nodes:
        raise ValidationError("ligand node count must lie in [1, nodes]")
    cls = np.r_[np.zeros(n_lig, dtype=np.int64), np.ones(a.nodes - n_lig, dtype=np.int64)]
    graphs = sample_batch(ck.denoiser(), [cls] * a.n_graphs, steps=a.steps, seed=a.seed)
    write_jsonl(graphs, a.out)
    if a.metrics:
        with open(a.metrics, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "n_fragments", "ring_count", "mean_ring_size"])
            for g in graphs:
                nf, _, rc, ms = fragment_stats(g, a.bond_threshold)
                w.writerow([g.graph_id, nf, rc, repr(ms)])


def _records(a):
    ck = Checkpoint.load(a.ckpt)
    recs = likelihood_records(read_graphs(a.data), ck, a.steps, a.probes, a.probe_kind, a.seed)
    return ck, recs


def cmd_likelihood(a):
    _, recs = _records(a)
    write_loglik_csv(a.out, recs)
    if a.traj_dir:
        d = Path(a.traj_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r in recs:
            r.to_npz(d / f"{r.graph_id}.npz")


def cmd_features(a):
    if a.traj_dir:
        files = sorted(Path(a.traj_dir).glob("*.npz"))
        if not files:
            raise ValidationError(f"no trajectory files in {a.traj_dir}")
        recs = [TrajectoryRecord.from_npz(f) for f in files]
        meta = {"source": str(a.traj_dir)}
    else:
        if not (a.ckpt and a.data):
            raise ValidationError("features needs --traj-dir or both --ckpt and --data")
        _, recs = _records(a)
        meta = feature_metadata(file_hash(a.ckpt), a.steps, a.probes, a.probe_kind, a.seed)
    X, names = feature_matrix(recs)
    write_feature_csv(a.out, [r.graph_id for r in recs], X, names, meta)


def cmd_fit_ood(a):
    _, X_id, names = read_feature_csv(a.id)
    X_ood = None
    if not a.single_class:
        if not a.ood:
            raise ValidationError("--ood is required unless --single-class")
        _, X_ood, _ = read_feature_csv(a.ood, names)
    ia = split_indices(len(X_id), [1 - a.val_fraction, a.val_fraction], a.seed)
    if X_ood is not None:
        ib = split_indices(len(X_ood), [1 - a.val_fraction, a.val_fraction], a.seed + 1)
        model = fit_detector(X_id[ia[0]], X_ood[ib[0]], X_id[ia[1]], X_ood[ib[1]], names, a.n_components,
                             a.folds, a.seed)
    else:
        model = fit_detector(X_id[ia[0]], None, X_id[ia[1]], None, names, a.n_components, a.folds, a.seed)
    model.save(a.out)
    print(json.dumps({"detector": str(a.out), "threshold": model.threshold, "h_id": model.kde_id.bandwidth,
                      "h_ood": None if model.kde_ood is None else model.kde_ood.bandwidth}))


def cmd_score(a):
    model = DetectorModel.load(a.detector)
    ids, X, _ = read_feature_csv(a.features, model.feature_names)
    write_scores_csv(a.out, ids, model, X)


def cmd_eval(a):
    model = DetectorModel.load(a.detector)
    _, X_id, _ = read_feature_csv(a.id, model.feature_names)
    _, X_ood, _ = read_feature_csv(a.ood, model.feature_names)
    rep = bootstrap_evaluate(model, X_id, X_ood, a.bootstrap, seed=a.seed)
    write_report(a.out, rep, {"threshold": model.threshold})
    print(json.dumps({k: rep.summary()[k] for k in ("auroc", "f1")}))


def _embeddings(path, standin):
    if str(path).endswith(".jsonl"):
        if standin is None:
            raise ValidationError("graph inputs need --model (stand-in regressor)")
        graphs = read_graphs(path)
        return standin.embed(graphs)
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"embedding file not found: {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{p}: non-numeric embedding ({exc})") from exc


def cmd_eval_baselines(a):
    standin = StandInRegressor.load(a.model) if a.model else None
    E_tr = _embeddings(a.id_train, standin)
    E_id = _embeddings(a.id_eval, standin)
    E_ood = _embeddings(a.ood, standin)
    names = [n.strip() for n in a.detectors.split(",") if n.strip()]
    bad = [n for n in names if n not in DETECTORS]
    if bad:
        raise ValidationError(f"unknown detectors {bad}; choose from {DETECTORS}")
    ia = split_indices(len(E_id), [0.5, 0.5], a.seed)
    ib = split_indices(len(E_ood), [0.5, 0.5], a.seed + 1)
    reps = baseline_suite(E_tr, E_id[ia[0]], E_ood[ib[0]], E_id[ia[1]], E_ood[ib[1]], names, a.bootstrap, a.seed)
    body = {n: reps[n].summary() for n in names}
    body["best"] = reps["best"]
    text = json.dumps(body, indent=2, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    print(text)


def cmd_ratein(a):
    if a.train:
        standin = StandInRegressor.init(hidden=a.hidden, seed=a.seed)
        standin.fit(read_graphs(a.train), steps=a.train_steps, seed=a.seed)
        standin.save(a.model)
    else:
        standin = StandInRegressor.load(a.model)
    rows = [("data", ratein_profile(standin, g, seed=a.seed)) for g in read_graphs(a.data)]
    write_ratein_csv(a.out, rows)


def cmd_pipeline(a):
    cfg = load_config(a.config) if a.config else {}
    out = run_pipeline(cfg, root=a.run_root, run_dir=a.run_dir)
    print(str(out))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajood", description="PF-ODE trajectory OOD detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("generate", help="write a synthetic graph family as JSONL")
    s.add_argument("--family", default="id", choices=["id", "geometric", "chemical"])
    s.add_argument("--spec", help="JSON family spec (overrides --family)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name")
    s.add_argument("--lam", type=float, help="chemical distortion weight")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--train", required=True)
    s.add_argument("--val", required=True)
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="reverse-SDE sampling")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n-graphs", type=int, default=10)
    s.add_argument("--nodes", type=int, required=True)
    s.add_argument("--ligand-nodes", type=int)
    s.add_argument("--steps", type=int, default=400)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bond-threshold", type=float, default=1.8)
    s.add_argument("--metrics", help="fragment/ring statistics CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    def ll_args(s, required=True):
        s.add_argument("--ckpt", required=required)
        s.add_argument("--data", required=required)
        s.add_argument("--steps", type=int, default=128)
        s.add_argument("--probes", type=int, default=4)
        s.add_argument("--probe-kind", default=RADEMACHER, choices=[RADEMACHER, GAUSSIAN, EXACT])
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("likelihood", help="PF-ODE log-likelihoods")
    ll_args(s)
    s.add_argument("--traj-dir", help="store one trajectory .npz per graph")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_likelihood)

    s = sub.add_parser("features", help="19 trajectory features per graph")
    ll_args(s, required=False)
    s.add_argument("--traj-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_features)

    s = sub.add_parser("fit-ood", help="fit the density-ratio detector")
    s.add_argument("--id", required=True)
    s.add_argument("--ood")
    s.add_argument("--single-class", action="store_true")
    s.add_argument("--n-components", type=int, default=15)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--val-fraction", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit_ood)

    s = sub.add_parser("score", help="score feature rows with a fitted detector")
    s.add_argument("--detector", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    s = sub.add_parser("eval", help="balanced bootstrap evaluation")
    s.add_argument("--detector", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--ood", required=True)
    s.add_argument("--bootstrap", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("eval-baselines", help="embedding-space baseline detectors")
    s.add_argument("--id-train", required=True)
    s.add_argument("--id-eval", required=True)
    s.add_argument("--ood", required=True)
    s.add_argument("--model", help="stand-in regressor for JSONL inputs")
    s.add_argument("--detectors", default=",".join(DETECTORS))
    s.add_argument("--bootstrap", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_baselines)

    s = sub.add_parser("ratein", help="Rate-In scores on the stand-in regressor")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--train", help="train a new stand-in on this JSONL and save it to --model")
    s.add_argument("--train-steps", type=int, default=300)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ratein)

    s = sub.add_parser("pipeline", help="end-to-end run")
    s.add_argument("--config")
    s.add_argument("--run-root", default="run")
    s.add_argument("--run-dir", help="explicit run directory (default: <run-root>/<timestamp>)")
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        a.fn(a)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
