import csv
import json
import math

import numpy as np
import pytest

import gcaresunet.cli as cli
from gcaresunet.attention import GcaConfig, gca_param_count
from gcaresunet.config import desk_run_config
from gcaresunet.data import read_dataset
from gcaresunet.model import attention_sites, count_params


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert cli.main(["synth", "--out", str(root), "--n", "20", "--seed", "3"]) == 0
    return root


def tiny_config(path, data_dir, epochs=2):
    cfg = desk_run_config()
    cfg.data.dir = str(data_dir)
    cfg.data.split = [0.7, 0.15, 0.15]
    cfg.train.epochs = epochs
    cfg.train.eval_every = 1
    path.write_text(cfg.dumps())
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = tiny_config(root / "cfg.json", dataset)
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return root / "out"


class TestSynth:
    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["synth", "--out", str(tmp_path / d), "--n", "10", "--seed", "7"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_labels_and_split(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path), "--n", "100", "--classes", "4"]) == 0
        samples, split = read_dataset(tmp_path)
        assert [len(split[k]) for k in ("train", "val", "test")] == [70, 15, 15]
        assert set(np.unique(np.concatenate([s.mask.ravel() for s in samples.values()]))) <= {0, 1, 2, 3}

    def test_invalid_classes_exit_2(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path), "--classes", "1"]) == 2
        assert "num_classes" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} == {"config.json", "history.csv", "best.ckpt"}
        assert len(read_csv(trained / "history.csv")) == 2

    def test_config_echo_reproduces_run(self, trained, tmp_path):
        assert cli.main(["train", "--config", str(trained / "config.json"), "--out", str(tmp_path)]) == 0
        assert tree_bytes(tmp_path) == tree_bytes(trained)

    def test_seed_override(self, dataset, tmp_path):
        cfg = tiny_config(tmp_path / "cfg.json", dataset, epochs=1)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "99"]) == 0
        assert json.loads((tmp_path / "o/config.json").read_text())["train"]["seed"] == 99

    def test_bad_config_lists_every_problem(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"model": {"attn": 1}, "train": {"epochs": 0}, "foo": {}}))
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "model.attn" in err and "train.epochs" in err and "foo" in err
        assert not (tmp_path / "o").exists()


class TestEval:
    def test_reproduces_history_val_mdsc(self, trained, dataset, tmp_path):
        out = tmp_path / "m.csv"
        assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset),
                         "--split", "val", "--metrics-out", str(out)]) == 0
        manifest = json.loads((trained / "best.ckpt/manifest.json").read_text())
        fg = read_csv(out)[-1]
        assert fg["sample"] == "mean" and fg["class"] == "fg_mean"
        assert abs(float(fg["dsc"]) - manifest["meta"]["val_mdsc"]) < 1e-6

    def test_perfect_oracle(self, trained, dataset, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "predict_masks", lambda model, samples, size: [s.mask for s in samples])
        out = tmp_path / "m.csv"
        assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset),
                         "--metrics-out", str(out)]) == 0
        fg = read_csv(out)[-1]
        assert float(fg["dsc"]) == 1.0 and float(fg["hd95"]) == 0.0

    def test_empty_split(self, trained, tmp_path, caplog):
        root = tmp_path / "ds"
        assert cli.main(["synth", "--out", str(root), "--n", "3"]) == 0
        split = json.loads((root / "split.json").read_text())
        (root / "split.json").write_text(json.dumps({**split, "test": []}))
        out = tmp_path / "m.csv"
        assert cli.main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(root),
                         "--metrics-out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 1 and rows[0]["class"] == "fg_mean"
        assert "empty" in caplog.text


def ablate(tmp_path, *grid, extra=()):
    out = tmp_path / "abl"
    code = cli.main(["ablate", "--n", "20", "--budget-epochs", "1", "--out", str(out),
                     "--grid", *grid, *extra])
    assert code == 0
    return read_csv(out / "ablation.csv")


class TestAblate:
    def test_groups_rows_ordered_by_closed_form(self, tmp_path):
        rows = ablate(tmp_path, "groups=1,2,4")
        assert [r["groups"] for r in rows] == ["1", "2", "4"]
        base = desk_run_config().model
        expected = [sum(gca_param_count(c, GcaConfig(groups=g)) for c in attention_sites(base))
                    for g in (1, 2, 4)]
        got = [int(r["attention_params"]) for r in rows]
        assert got == expected and got[0] > got[1] > got[2]
        assert all(r["status"] == "ok" and math.isfinite(float(r["mdsc"])) for r in rows)

    def test_pooling_and_attention_rows(self, tmp_path):
        rows = ablate(tmp_path, "pooling=avg,max,both", "attention=none,GCA")
        assert [(r["table"], r[r["table"]]) for r in rows] == [
            ("pooling", "avg"), ("pooling", "max"), ("pooling", "both"),
            ("attention", "none"), ("attention", "GCA")]
        none = int(rows[3]["params"])
        assert all(none < int(r["params"]) for r in rows if r["attention"] != "none")
        # the default-config row is trained once and shared
        assert rows[2]["mdsc"] == rows[4]["mdsc"]

    def test_params_match_count_params(self, tmp_path):
        rows = ablate(tmp_path, "reduction=1,8")
        for r in rows:
            cfg = desk_run_config().model
            cfg.gca.reduction = int(r["reduction"])
            assert int(r["params"]) == count_params(cfg)["total"]

    def test_indivisible_combo_skipped(self, tmp_path):
        cfg = desk_run_config()
        cfg.model.width_scale = 1
        p = tmp_path / "cfg.json"
        p.write_text(cfg.dumps())
        rows = ablate(tmp_path, "groups=3", extra=("--config", str(p)))
        assert rows[0]["status"] == "skipped" and "not divisible by G=3" in rows[0]["reason"]

    def test_bad_grid(self, tmp_path, capsys):
        assert cli.main(["ablate", "--out", str(tmp_path), "--grid", "depth=1"]) == 1
        assert "bad grid entry" in capsys.readouterr().err

    def test_full_design_is_product(self):
        pts = cli.ablation_points({"groups": [1, 2], "pooling": ["avg", "max", "both"]}, "full")
        assert len(pts) == 6 and {p["pooling"] for _, p in pts} == {"avg", "max", "both"}


class TestGradcheckAndParams:
    def test_gradcheck_ops_passes(self, capsys):
        assert cli.main(["gradcheck", "--target", "ops", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "conv2d" in out

    def test_gradcheck_fails_with_coarse_eps(self, capsys):
        assert cli.main(["gradcheck", "--target", "ops", "--seeds", "1", "--eps", "0.5"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_params_report(self, capsys):
        assert cli.main(["params"]) == 0
        out = capsys.readouterr().out
        assert "baseline (attention=none) params: 43.93 M vs reported 43.93 M" in out
        assert "vs reported 44.98 M" in out and "vs reported 17.57 G" in out
