import csv
import json

import numpy as np
import pytest

from meatrd.cli import main, read_scores_csv, write_scores_csv

SYNTH = ["--set", "n_spots=150", "--set", "n_ref_spots=80", "--set", "n_genes=30", "--set", "patch_size=16"]


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, tiny_config):
    p = tmp_path_factory.mktemp("cfg") / "config.json"
    p.write_text(json.dumps(tiny_config))
    return str(p)


@pytest.fixture(scope="module")
def chain(tmp_path_factory, config_file):
    """synth -> pretrain -> train -> infer -> eval into one directory."""
    out = tmp_path_factory.mktemp("run")
    d = str(out)
    assert main(["synth", "--out", d, "--seed", "1", *SYNTH]) == 0
    common = ["--config", config_file, "--seed", "1", "--out", d]
    assert main(["pretrain", *common, "--reference", f"{d}/reference.mtds"]) == 0
    assert main(["train", *common, "--reference", f"{d}/reference.mtds"]) == 0
    assert main(["infer", *common, "--target", f"{d}/target.mtds"]) == 0
    assert main(["eval", *common, "--scores", f"{d}/scores.csv"]) == 0
    return out


def test_chain_writes_every_artifact(chain):
    for name in ("reference.mtds", "target.mtds", "synth.json", "stage1.mprm", "stage2.mprm", "stage3.mprm",
                 "model.json", "scores.csv", "labels.csv", "em_report.json", "eval.csv", "manifest.json"):
        assert (chain / name).exists(), name
    manifest = json.loads((chain / "manifest.json").read_text())
    assert [c["command"] for c in manifest["commands"]] == ["synth", "pretrain", "train", "infer", "eval"]
    assert manifest["artifacts"]["scores"] == "scores.csv"


def test_scores_csv_layout(chain):
    lines = (chain / "scores.csv").read_text().splitlines()
    assert lines[0] == "spot_id,score,label" and len(lines) == 151
    scores, labels = read_scores_csv(chain / "scores.csv")
    assert labels.sum() == 15 and np.all(np.isfinite(scores))


def test_em_report_and_labels(chain):
    rep = json.loads((chain / "em_report.json").read_text())
    assert {"priors", "log_posterior", "final", "iterations", "converged"} <= set(rep)
    with open(chain / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rep["label_counts"]["anomaly"] == sum(int(r["anomaly"]) for r in rows)


def test_eval_csv(chain):
    with open(chain / "eval.csv") as fh:
        row = next(csv.DictReader(fh))
    assert 0.0 <= float(row["auc"]) <= 1.0


def test_rerun_is_byte_identical(chain, tmp_path, config_file):
    d = str(tmp_path)
    common = ["--config", config_file, "--seed", "1", "--out", d]
    assert main(["pretrain", *common, "--reference", f"{chain}/reference.mtds"]) == 0
    assert main(["train", *common, "--reference", f"{chain}/reference.mtds"]) == 0
    assert main(["infer", *common, "--target", f"{chain}/target.mtds"]) == 0
    assert (tmp_path / "scores.csv").read_bytes() == (chain / "scores.csv").read_bytes()


def test_eval_perfect_scores(tmp_path):
    labels = np.array([0, 0, 1, 0, 1])
    write_scores_csv(tmp_path / "s.csv", labels * 2.0, labels)
    assert main(["eval", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "eval.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["f1"]) == 1.0 and float(row["auc"]) == 1.0


def test_train_without_stage1_is_a_config_error(chain, tmp_path, config_file, capsys):
    code = main(["train", "--config", config_file, "--out", str(tmp_path), "--reference",
                 f"{chain}/reference.mtds"])
    assert code == 2 and "pretrain" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [{"loss.alpha": 1.0}, {"occ.beta": 0.0}, {"bogus": 1}])
def test_bad_config_exits_2(tmp_path, cfg):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_bad_generator_field_exits_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--set", "colour=1"]) == 2


def test_unknown_ablation_exits_2(tmp_path):
    assert main(["synth", "--ablation", "nope", "--out", str(tmp_path)]) == 2


def test_corrupt_dataset_exits_3(tmp_path):
    bad = tmp_path / "bad.mtds"
    bad.write_bytes(b"MTDS\x01\x00garbage")
    assert main(["pretrain", "--reference", str(bad), "--out", str(tmp_path)]) == 3


def test_missing_dataset_exits_3(tmp_path):
    assert main(["pretrain", "--reference", str(tmp_path / "none.mtds"), "--out", str(tmp_path)]) == 3


def test_eval_without_labels_exits_3(tmp_path):
    write_scores_csv(tmp_path / "s.csv", [0.1, 0.2])
    assert main(["eval", "--scores", str(tmp_path / "s.csv"), "--out", str(tmp_path)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(chain, tmp_path, tiny_config):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**tiny_config, "stage1.lr": 1e30, "stage1.epochs": 2}))
    code = main(["pretrain", "--config", str(p), "--out", str(tmp_path), "--reference", f"{chain}/reference.mtds"])
    assert code == 4


def test_flags_override_config(tmp_path, config_file):
    assert main(["synth", "--config", config_file, "--seed", "3", "--adaptive-beta", "--out", str(tmp_path),
                 *SYNTH]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["config"]["occ.adaptive_beta"] is True
    assert manifest["config"]["mgdat.finetune_e1"] is False


def test_bench_small(tmp_path, config_file):
    code = main(["bench", "--config", config_file, "--out", str(tmp_path), "--seeds", "0",
                 "--variants", "full", "no_oc", *SYNTH])
    assert code == 0
    manifest = json.loads((tmp_path / "benchmark.json").read_text())
    assert manifest["seeds"] == [0] and manifest["variants"] == ["full", "no_oc"]
    assert manifest["config"]["stage1.lr"] == 1e-3 and manifest["config"]["model.embed_dim"] == 16
    with open(tmp_path / "eval.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["full", "no_oc"]


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and "meatrd" in capsys.readouterr().out
