import json

import pytest

from selfbc.cli import ConfigError, main, resolve_config

TINY = ["--set", "hidden_sizes=[8,8]", "--set", "batch_size=16", "--set", "n_bc=20", "--set", "n_ebc=20",
        "--set", "n_selfbc=20", "--set", "eval_every=10", "--set", "eval_episodes=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n-transitions", "1000", "--output-dir", str(root / "data")]) == 0
    ds = str(root / "data" / "dataset.sbc1")
    for seed in (0, 1):
        code = main(["pretrain", "--dataset", ds, "--seed", str(seed),
                     "--output-dir", str(root / f"pre{seed}"), *TINY])
        assert code == 0
    return root, ds


def ckpt(root, seed=0):
    return str(root / f"pre{seed}" / "checkpoints" / "pretrain.sbck")


class TestSubcommands:
    def test_gen_data_layout(self, workspace):
        root, _ = workspace
        assert sorted(p.name for p in (root / "data").iterdir()) == ["config.json", "dataset.sbc1", "report.json"]
        assert json.loads((root / "data" / "report.json").read_text())["n"] == 1000

    def test_pretrain_layout(self, workspace):
        root, _ = workspace
        names = {p.name for p in (root / "pre0").iterdir()}
        assert names == {"config.json", "metrics.csv", "metrics.jsonl", "checkpoints", "report.json"}
        cfg = json.loads((root / "pre0" / "config.json").read_text())
        assert cfg["trainer"]["hidden_sizes"] == [8, 8] and cfg["trainer_preset"] == "full"

    @pytest.mark.parametrize("extra", [[], ["--no-ema"], ["--ref-init", "behavior"], ["--scale-ref", "1.0"]])
    def test_train_selfbc(self, workspace, tmp_path, extra):
        root, ds = workspace
        out = tmp_path / "s"
        assert main(["train-selfbc", "--dataset", ds, "--checkpoint", ckpt(root),
                     "--output-dir", str(out), *TINY, *extra]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["final"]["step"] == 20
        assert (out / "checkpoints" / "selfbc.sbck").is_file()

    def test_train_esbc(self, workspace, tmp_path):
        root, ds = workspace
        out = tmp_path / "e"
        assert main(["train-esbc", "--dataset", ds, "--checkpoint", ckpt(root), "--checkpoint", ckpt(root, 1),
                     "--n-ens", "2", "--output-dir", str(out), *TINY]) == 0
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["esbc_0.sbck", "esbc_1.sbck"]

    def test_esbc_count_mismatch(self, workspace, tmp_path):
        root, ds = workspace
        assert main(["train-esbc", "--dataset", ds, "--checkpoint", ckpt(root), "--n-ens", "2",
                     "--output-dir", str(tmp_path / "e"), *TINY]) == 2
        assert not (tmp_path / "e").exists()

    def test_sweep_beta(self, workspace, tmp_path):
        _, ds = workspace
        out = tmp_path / "b"
        assert main(["sweep-beta", "--dataset", ds, "--grid", "1.0,0.1", "--seeds", "0",
                     "--output-dir", str(out), *TINY]) == 0
        summary = json.loads((out / "report.json").read_text())["summary"]
        assert [row["beta"] for row in summary] == [1.0, 0.1]
        assert (out / "runs" / "beta=0.1" / "seed=0" / "metrics.csv").is_file()

    def test_sweep_beta_default_grid(self):
        cfg = resolve_config("sweep-beta", None, {})
        assert cfg["grid"] == [1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05, 0.01, 0.005]

    def test_sweep_scale_ref(self, workspace, tmp_path):
        root, ds = workspace
        out = tmp_path / "r"
        assert main(["sweep-scale-ref", "--dataset", ds, "--checkpoint", ckpt(root), "--grid", "1.0,0.01",
                     "--output-dir", str(out), *TINY]) == 0
        runs = json.loads((out / "report.json").read_text())["runs"]
        assert [r["tau_ref"] for r in runs] == pytest.approx([0.005, 0.00005])

    def test_verify_theory(self, tmp_path, capsys):
        out = tmp_path / "t"
        assert main(["verify-theory", "--instances", "100", "--kappa", "5e-5", "--output-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["all_pass"] and report["n_instances"] == 100
        assert "100/100" in capsys.readouterr().out

    def test_eval(self, workspace, tmp_path):
        root, ds = workspace
        out = tmp_path / "v"
        assert main(["eval", "--dataset", ds, "--checkpoint", ckpt(root), "--episodes", "2",
                     "--output-dir", str(out)]) == 0
        assert set(json.loads((out / "report.json").read_text())) >= {"normalized_score", "dataset_bc_mse"}

    def test_export_curves(self, workspace, tmp_path):
        root, _ = workspace
        out = tmp_path / "c"
        assert main(["export-curves", "--runs", str(root / "pre0"), str(root / "pre1"),
                     "--output-dir", str(out)]) == 0
        lines = (out / "curves.csv").read_text().splitlines()
        assert lines[0] == "run,step,mean_return,normalized_score,dataset_bc_mse,log10_bc_mse"
        assert json.loads((out / "report.json").read_text())["n_runs"] == 2


class TestValidation:
    def test_unknown_keys_all_listed(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bogus": 1, "also_bogus": 2, "trainer": {"nope": 3}}))
        with pytest.raises(ConfigError) as info:
            resolve_config("pretrain", json.loads(cfg.read_text()), {})
        for key in ("bogus", "also_bogus", "nope"):
            assert key in str(info.value)
        assert main(["pretrain", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2

    def test_missing_dataset_no_outputs(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["pretrain", "--dataset", str(tmp_path / "absent.sbc1"), "--output-dir", str(out)]) == 2
        assert "dataset_path" in capsys.readouterr().err
        assert list(tmp_path.iterdir()) == []

    def test_existing_output_dir(self, tmp_path):
        (tmp_path / "o").mkdir()
        assert main(["verify-theory", "--instances", "1", "--output-dir", str(tmp_path / "o")]) == 2

    def test_failure_mid_run_leaves_nothing(self, workspace, tmp_path):
        _, ds = workspace
        # beta <= 0 is rejected once training starts building its config
        assert main(["sweep-beta", "--dataset", ds, "--grid", "-1", "--output-dir", str(tmp_path / "o"),
                     *TINY]) == 2
        assert list(tmp_path.iterdir()) == []

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SELFBC_OUTPUT_ROOT", str(tmp_path / "root"))
        assert main(["verify-theory", "--instances", "2"]) == 0
        (run,) = (tmp_path / "root").iterdir()
        assert run.name.startswith("verify-theory-seed0-")


class TestReproducibility:
    def test_rerun_config_identical_metrics(self, workspace, tmp_path):
        root, ds = workspace
        first = tmp_path / "a"
        assert main(["train-selfbc", "--dataset", ds, "--checkpoint", ckpt(root),
                     "--output-dir", str(first), *TINY]) == 0
        second = tmp_path / "b"
        assert main(["train-selfbc", "--config", str(first / "config.json"), "--output-dir", str(second)]) == 0
        assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()

    def test_inputs_not_mutated(self, workspace, tmp_path):
        root, ds = workspace
        before = (open(ds, "rb").read(), open(ckpt(root), "rb").read())
        assert main(["train-selfbc", "--dataset", ds, "--checkpoint", ckpt(root),
                     "--output-dir", str(tmp_path / "s"), *TINY]) == 0
        assert (open(ds, "rb").read(), open(ckpt(root), "rb").read()) == before
