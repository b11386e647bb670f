import csv
import hashlib

import pytest

from hiernav.cli import run
from hiernav.hierarchy import parse_hierarchy


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["data", "gen", "--branching", "2,3,3", "--dim", "6", "--level-scales", "1.5,1,0.5",
                "--noise", "0.5", "--per-leaf", "20", "--seed", "1", "--out-dir", str(d)]) == 0
    assert run(["split", "make", "--hierarchy", str(d / "hierarchy.tsv"),
                "--band", "1-1:0.5:coarse", "--band", "3-3:0.15:fine", "--seed", "6",
                "--out", str(d / "split.tsv"), "--out-hierarchy", str(d / "id.tsv")]) == 0
    common = ["--hierarchy", str(d / "hierarchy.tsv"), "--split", str(d / "split.tsv")]
    train = ["train", *common, "--train", str(d / "train.tsv"), "--val", str(d / "val.tsv"),
             "--epochs", "6", "--batch-size", "16", "--milestones", "4", "--seed", "0"]
    assert run([*train, "--beta", "0.2", "--out", str(d / "hsc.zip"), "--log", str(d / "log.csv")]) == 0
    assert run([*train, "--flat", "--out", str(d / "flat.zip")]) == 0
    return d, common


def test_data_gen_outputs(workspace):
    d, _ = workspace
    for name in ("hierarchy.tsv", "train.tsv", "val.tsv", "test.tsv"):
        assert (d / name).stat().st_size > 0
    h = parse_hierarchy((d / "hierarchy.tsv").read_text())
    assert len(h.leaves) == 18


def test_training_log(workspace):
    d, _ = workspace
    log = rows(d / "log.csv")
    assert len(log) == 7
    assert log[0][0] == "epoch"


def test_calibrate_score_infer(workspace):
    d, common = workspace
    model = ["--model", str(d / "hsc.zip")]
    assert run(["calibrate", *common, *model, "--val", str(d / "val.tsv"), "--tnr", "0.9",
                "--fallback", "--out", str(d / "thr.tsv")]) == 0
    assert run(["score", *common, *model, "--data", str(d / "test.tsv"),
                "--out", str(d / "scores.csv")]) == 0
    header = rows(d / "scores.csv")[0]
    assert header == ["sample_index", "predicted_leaf_name", "path_prob", "h_mean", "h_min"]
    assert run(["infer", *common, *model, "--thresholds", str(d / "thr.tsv"),
                "--data", str(d / "test.tsv"), "--out", str(d / "pred.csv")]) == 0
    out = rows(d / "pred.csv")
    assert out[0] == ["sample_index", "label", "predicted_leaf", "inferred_node"]
    assert len(out) > 1


def test_flat_scores(workspace):
    d, common = workspace
    assert run(["score", *common, "--model", str(d / "flat.zip"), "--data", str(d / "test.tsv"),
                "--out", str(d / "msp.csv")]) == 0
    assert rows(d / "msp.csv")[0] == ["sample_index", "predicted_leaf_name", "msp"]


def test_eval_and_sweep(workspace):
    d, common = workspace
    out = d / "eval"
    out.mkdir()
    assert run(["eval", *common, "--model", str(d / "hsc.zip"), "--flat-model", str(d / "flat.zip"),
                "--val", str(d / "val.tsv"), "--test", str(d / "test.tsv"), "--out", str(out)]) == 0
    table = rows(out / "granularity_auroc.csv")
    assert table[0] == ["model", "metric", "fine", "medium", "coarse", "overall"]
    assert {r[1] for r in table[1:]} >= {"path_prob", "h_mean", "h_min", "msp"}
    assert (out / "outcomes.csv").exists()
    assert list(out.glob("confusion_*.csv"))
    assert run(["sweep", *common, "--model", str(d / "hsc.zip"), "--val", str(d / "val.tsv"),
                "--test", str(d / "test.tsv"), "--tnr-grid", "0.5,0.9",
                "--out", str(d / "sweep.csv")]) == 0
    assert len(rows(d / "sweep.csv")) == 5


def test_hierarchy_commands(tmp_path):
    src = tmp_path / "h.tsv"
    src.write_text("r\t-\na\tr\nb\ta\nc\ta\nd\tr\ne\td\n")
    before = digest(src)
    assert run(["hierarchy", "prune", "--in", str(src), "--out", str(tmp_path / "p.tsv")]) == 0
    assert run(["hierarchy", "prune", "--in", str(tmp_path / "p.tsv"),
                "--out", str(tmp_path / "pp.tsv")]) == 0
    assert (tmp_path / "p.tsv").read_bytes() == (tmp_path / "pp.tsv").read_bytes()
    assert digest(src) == before
    pruned = parse_hierarchy((tmp_path / "p.tsv").read_text())
    assert not pruned.has_node("d")
    assert run(["hierarchy", "stats", "--in", str(src), "--out", str(tmp_path / "s.tsv")]) == 0
    stats = dict(line.split("\t") for line in (tmp_path / "s.tsv").read_text().splitlines())
    assert stats["nodes"] == "6" and stats["single_child_nodes"] == "1"


def test_entropy_prune(workspace, tmp_path):
    d, _ = workspace
    out = tmp_path / "e.tsv"
    assert run(["hierarchy", "entropy-prune", "--in", str(d / "hierarchy.tsv"),
                "--data", str(d / "train.tsv"), "--target", "3", "--out", str(out)]) == 0
    assert len(parse_hierarchy(out.read_text()).internals) == 3


class TestExitCodes:
    def test_help(self, capsys):
        assert run(["--help"]) == 0
        assert "hiernav" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert run(["hierarchy", "prune", "--bogus"]) == 1

    def test_missing_input(self, tmp_path):
        assert run(["hierarchy", "stats", "--in", str(tmp_path / "nope.tsv")]) == 1

    def test_refuses_to_overwrite_input(self, tmp_path):
        src = tmp_path / "h.tsv"
        src.write_text("r\t-\na\tr\nb\tr\n")
        assert run(["hierarchy", "prune", "--in", str(src), "--out", str(src)]) == 1
        assert src.read_text() == "r\t-\na\tr\nb\tr\n"

    def test_malformed_hierarchy(self, tmp_path, capsys):
        src = tmp_path / "h.tsv"
        src.write_text("r\t-\na\tzz\n")
        assert run(["hierarchy", "stats", "--in", str(src)]) == 1
        assert str(src) in capsys.readouterr().err

    def test_model_hierarchy_mismatch(self, workspace, tmp_path):
        d, _ = workspace
        assert run(["score", "--hierarchy", str(d / "hierarchy.tsv"), "--model", str(d / "hsc.zip"),
                    "--data", str(d / "test.tsv"), "--out", str(tmp_path / "x.csv")]) == 1
