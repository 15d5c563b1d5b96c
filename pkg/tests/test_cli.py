import json

import pytest

from vitresnas.cli import main, merge_overrides


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy"
    assert main(["gen-data", "--classes", "4", "--count", "48", "--size", "56", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def train_cfg(tmp_path):
    p = tmp_path / "train.json"
    p.write_text(json.dumps({"arch": "toy", "train": {"epochs": 2, "batch_size": 16, "per_class_val": 2}}))
    return p


class TestGenData:
    def test_manifest(self, dataset):
        m = json.loads((dataset / "manifest.json").read_text())
        assert m["count"] == 48 and m["num_classes"] == 4

    def test_bit_identical(self, dataset, tmp_path):
        main(["gen-data", "--classes", "4", "--count", "48", "--size", "56", "--seed", "1", "--out", str(tmp_path / "again")])
        assert (tmp_path / "again" / "data.bin").read_bytes() == (dataset / "data.bin").read_bytes()

    def test_bad_size(self, tmp_path, capsys):
        assert main(["gen-data", "--size", "50", "--out", str(tmp_path / "x")]) == 2
        assert "multiple of 14" in capsys.readouterr().err


class TestTrain:
    def test_run_directory(self, dataset, train_cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(train_cfg), "--data", str(dataset), "--out", str(out)]) == 0
        for name in ("config.json", "run.json", "metrics.csv", "checkpoint.vrns"):
            assert (out / name).exists()
        run = json.loads((out / "run.json").read_text())
        assert run["seed"] == 0 and run["build_id"]

    def test_resume_reproduces_uninterrupted_run(self, dataset, train_cfg, tmp_path):
        base = ["train", "--config", str(train_cfg), "--data", str(dataset)]
        assert main(base + ["--out", str(tmp_path / "full")]) == 0
        assert main(base + ["--out", str(tmp_path / "part"), "--stop-after-epoch", "1"]) == 0
        assert main(base + ["--out", str(tmp_path / "part"), "--resume", str(tmp_path / "part" / "checkpoint.vrns")]) == 0
        assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()

    def test_seed_env_override(self, dataset, train_cfg, tmp_path, monkeypatch):
        monkeypatch.setenv("RESNAS_SEED", "17")
        assert main(["train", "--config", str(train_cfg), "--data", str(dataset), "--out", str(tmp_path / "r"), "--set", "train.epochs=1"]) == 0
        cfg = json.loads((tmp_path / "r" / "config.json").read_text())
        assert cfg["seed"] == 17 and cfg["train"]["seed"] == 17 and cfg["train"]["epochs"] == 1

    def test_missing_config(self, dataset, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json"), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_option(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--set", "train.bogus=1"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, dataset, tmp_path):
        args = ["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--set", "train.base_lr=1e30", "--set", "train.epochs=3"]
        assert main(args) == 3


class TestSupernetAndSearch:
    def test_pipeline(self, dataset, tmp_path):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps({"space": "toy", "train": {"epochs": 2, "batch_size": 8, "num_archs": 4, "per_class_val": 2}}))
        sn = tmp_path / "sn"
        assert main(["train-supernet", "--config", str(cfg), "--data", str(dataset), "--out", str(sn)]) == 0
        warm = (sn / "warmup.csv").read_text().splitlines()
        first, last = warm[1].split(","), warm[-1].split(",")
        assert int(first[2]) < int(first[3]) and last[2] == last[3]
        evo = tmp_path / "evo.json"
        evo.write_text(json.dumps({"population_size": 8, "num_parents": 4, "num_children": 4, "iterations": 2}))
        se = tmp_path / "se"
        args = ["search", "--supernet-checkpoint", str(sn / "checkpoint.vrns"), "--data", str(dataset), "--evo-config", str(evo), "--out", str(se)]
        assert main(args) == 0
        best = json.loads((se / "best_gene.json").read_text())
        assert len((se / "search_history.csv").read_text().splitlines()) == 4
        assert main(["eval", "--checkpoint", str(sn / "checkpoint.vrns"), "--data", str(dataset), "--gene", str(se / "best_gene.json")]) == 0
        assert best["macs"] > 0

    def test_supernet_default_num_archs(self, dataset, tmp_path):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps({"train": {"batch_size": 20}}))
        assert main(["train-supernet", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 2

    def test_synthetic_search(self, tmp_path, capsys):
        assert main(["search", "--synthetic-fitness", "--space", "micro", "--constraint-macs", "472544", "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "best_gene.json").exists()

    def test_infeasible_search(self, tmp_path):
        evo = tmp_path / "evo.json"
        evo.write_text(json.dumps({"population_size": 4, "num_parents": 2, "num_children": 2, "iterations": 1, "max_draws": 100}))
        args = ["search", "--synthetic-fitness", "--constraint-macs", "1", "--evo-config", str(evo), "--out", str(tmp_path / "o")]
        assert main(args) == 3


class TestCostAndEval:
    def test_cost_tiny(self, capsys):
        assert main(["cost", "--arch", "vit-resnas-tiny"]) == 0
        out = capsys.readouterr().out
        assert "1.794G" in out and "41.50M" in out

    def test_cost_resolution(self, capsys):
        assert main(["cost", "--arch", "vit-resnas-tiny", "--resolution", "448"]) == 0
        assert "[1025, 257, 65]" in capsys.readouterr().out

    def test_malformed_arch(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text("{oops")
        assert main(["cost", "--arch", str(p)]) == 2

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(dataset)]) == 2

    def test_eval_deterministic(self, dataset, train_cfg, tmp_path, capsys):
        main(["train", "--config", str(train_cfg), "--data", str(dataset), "--out", str(tmp_path / "r"), "--set", "train.epochs=1"])
        capsys.readouterr()
        ck = str(tmp_path / "r" / "checkpoint.vrns")
        main(["eval", "--checkpoint", ck, "--data", str(dataset)])
        a = capsys.readouterr().out
        main(["eval", "--checkpoint", ck, "--data", str(dataset)])
        assert a == capsys.readouterr().out and a.startswith("top1:")

    def test_usage_error(self):
        assert main(["frobnicate"]) == 2


def test_merge_overrides():
    out = merge_overrides({"a": {"b": 1}}, ["a.b=2", "a.c.d=\"x\"", "e=true"])
    assert out == {"a": {"b": 2, "c": {"d": "x"}}, "e": True}
