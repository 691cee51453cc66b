import csv
import json

import numpy as np
import pytest

from trajood.cli import main
from trajood.errors import ValidationError
from trajood.pipeline import load_config, merge_config, split_indices, stage_seed
from trajood.sampler import js_divergence
from trajood.synthetic import (SyntheticFamilySpec, _resolve, chemical_shift, generate_family, id_family,
                               type_marginals)


def _sorted_distances(g):
    d = np.linalg.norm(g.node_coords[:, None] - g.node_coords[None], axis=2)
    return np.sort(d[np.triu_indices(g.n, 1)])


def test_zero_jitter_single_motif_congruent():
    n = _resolve("ring6").n
    spec = SyntheticFamilySpec(templates=["ring6"], weights=[1.0], jitter=0.0, node_count_range=(n, n), seed=4)
    gs = generate_family(spec, 5)
    ref = _sorted_distances(gs[0])
    for g in gs[1:]:
        np.testing.assert_allclose(_sorted_distances(g), ref, atol=1e-9)
    assert not np.allclose(gs[0].node_coords, gs[1].node_coords)


def test_distorted_marginal_diverges():
    lig_id, _ = type_marginals(generate_family(id_family(seed=1), 300))
    lig_chem, _ = type_marginals(generate_family(chemical_shift(seed=1), 300))
    assert js_divergence(lig_id, lig_chem) > 0.1


def test_same_seed_byte_identical_jsonl(tmp_path):
    for name in ("a", "b"):
        assert main(["generate", "--family", "chemical", "--count", "7", "--seed", "3", "--out",
                     str(tmp_path / f"{name}.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_family_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticFamilySpec(weights=[0.2, 0.2])
    with pytest.raises(ValidationError):
        SyntheticFamilySpec(templates=["hexagon"], weights=[1.0])
    with pytest.raises(ValidationError):
        generate_family(id_family(), 0)


def test_split_and_config_helpers(tmp_path):
    parts = split_indices(10, [0.5, 0.25, 0.25], seed=1)
    assert sorted(np.concatenate(parts).tolist()) == list(range(10)) and [len(p) for p in parts] == [5, 2, 3]
    assert stage_seed(0, "train") == stage_seed(0, "train") != stage_seed(0, "ratein")
    assert merge_config({"a": {"b": 1, "c": 2}}, {"a": {"b": 5}}) == {"a": {"b": 5, "c": 2}}
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(ValidationError):
        load_config(bad)
    with pytest.raises(ValidationError, match="missing.json"):
        load_config(tmp_path / "missing.json")


def test_cli_error_exit_codes(tmp_path, capsys):
    assert main(["score", "--detector", str(tmp_path / "nope.bin"), "--features", "x", "--out", "y"]) == 2
    assert main(["pipeline", "--config", str(tmp_path / "absent.json")]) == 2
    assert "absent.json" in capsys.readouterr().err
    assert main(["likelihood", "--ckpt", str(tmp_path / "c.json"), "--data", str(tmp_path / "d.jsonl"),
                 "--out", str(tmp_path / "o.csv")]) == 2


def test_cli_end_to_end(tmp_path, capsys):
    p = lambda name: str(tmp_path / name)  # noqa: E731
    for fam, n, seed, out in (("id", 40, 0, "train"), ("id", 12, 1, "val"), ("id", 40, 2, "id"),
                              ("geometric", 40, 3, "ood")):
        assert main(["generate", "--family", fam, "--count", str(n), "--seed", str(seed), "--out",
                     p(out + ".jsonl")]) == 0
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"optimizer": "adam", "learning_rate": 1e-3, "eval_every": 5,
                               "model": {"n_layers": 2, "hidden": 16, "edge_dim": 8, "d": 4}}))
    assert main(["train", "--train", p("train.jsonl"), "--val", p("val.jsonl"), "--config", str(cfg),
                 "--steps", "10", "--out", p("ck.json")]) == 0
    assert main(["sample", "--ckpt", p("ck.json"), "--n-graphs", "2", "--nodes", "8", "--steps", "4",
                 "--out", p("s.jsonl"), "--metrics", p("frag.csv")]) == 0
    assert main(["likelihood", "--ckpt", p("ck.json"), "--data", p("id.jsonl"), "--steps", "8", "--probes", "1",
                 "--out", p("ll.csv"), "--traj-dir", p("traj")]) == 0
    assert main(["features", "--traj-dir", p("traj"), "--out", p("id_from_traj.csv")]) == 0
    for name in ("id", "ood"):
        assert main(["features", "--ckpt", p("ck.json"), "--data", p(name + ".jsonl"), "--steps", "8",
                     "--probes", "1", "--out", p(name + ".csv")]) == 0
    assert main(["fit-ood", "--id", p("id.csv"), "--ood", p("ood.csv"), "--n-components", "4",
                 "--out", p("det.bin")]) == 0
    assert main(["fit-ood", "--id", p("id.csv"), "--single-class", "--n-components", "4",
                 "--out", p("det1.bin")]) == 0
    assert main(["score", "--detector", p("det.bin"), "--features", p("ood.csv"), "--out", p("scores.csv")]) == 0
    assert main(["eval", "--detector", p("det.bin"), "--id", p("id.csv"), "--ood", p("ood.csv"),
                 "--bootstrap", "10", "--out", p("eval.json")]) == 0
    assert main(["ratein", "--model", p("standin.json"), "--train", p("train.jsonl"), "--train-steps", "20",
                 "--data", p("val.jsonl"), "--out", p("ratein.csv")]) == 0
    assert main(["eval-baselines", "--id-train", p("train.jsonl"), "--id-eval", p("id.jsonl"), "--ood",
                 p("ood.jsonl"), "--model", p("standin.json"), "--bootstrap", "10", "--out", p("base.json")]) == 0
    with open(p("scores.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 40 and set(rows[0]) == {"id", "L", "S", "decision", "percentile", "risk_level"}
    assert {r["risk_level"] for r in rows} <= {"Low", "Medium", "High"}
    with open(p("ll.csv"), newline="") as fh:
        assert len(list(csv.reader(fh))) == 41
    report = json.loads((tmp_path / "eval.json").read_text())
    assert 0.0 <= report["auroc"]["mean"] <= 1.0
    assert set(json.loads((tmp_path / "base.json").read_text())) >= {"mah", "knn", "lof", "iforest", "ocsvm", "best"}
