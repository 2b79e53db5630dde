import os

import numpy as np
import pytest

from svqlab import cli
from svqlab import experiments as ex
from svqlab.errors import ConfigError
from svqlab.solvers import flops_estimate

TINY = dict(height=16, width=16, frames=2, train_count=12, test_count=4, latent_channels=8,
            hidden_channels=4, epochs=1, batch_size=4, codebook_size=16, svq_hidden=8,
            num_quantizers=2, heads=2, groups=2, fsq_levels=[2, 2, 2, 2], sizes=[16],
            ablate_sizes=[16], etas=[0.0, 0.1], svq_raw_iters=3, svq_raw_lambdas=[0.1, 0.5])

TOML = "\n".join(f"{k} = {v!r}".replace("'", '"') for k, v in TINY.items()) + "\n"


def tiny(**kw):
    return ex.config_from_dict({**TINY, **kw})


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TOML)
    return str(path)


class TestConfig:
    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError, match="valid keys") as e:
            ex.config_from_dict({"sedd": 1})
        assert "seed" in str(e.value)

    def test_type_errors(self):
        with pytest.raises(ConfigError):
            ex.config_from_dict({"epochs": "ten"})
        with pytest.raises(ConfigError):
            ex.config_from_dict({"sizes": [4, 2]})
        with pytest.raises(ConfigError):
            ex.config_from_dict({"quantizer": "magic"})
        with pytest.raises(ConfigError):
            ex.config_from_dict({"covering_deltas": [0.5, 1.5]})

    def test_every_key_documented(self):
        text = ex.config_help()
        for name, _, _ in ex.config_keys():
            assert f"  {name} = " in text

    def test_load_toml(self, config_file):
        assert ex.load_config(config_file) == tiny()

    def test_hash_tracks_config(self):
        assert tiny().config_hash() == tiny().config_hash()
        assert tiny().config_hash() != tiny(seed=1).config_hash()

    def test_fnv1a_vectors(self):
        assert ex.fnv1a_64(b"") == 0xCBF29CE484222325
        assert ex.fnv1a_64(b"a") == 0xAF63DC4C8601EC8C

    def test_format_value(self):
        assert ex.format_value(1 / 3) == "0.333333"
        assert ex.format_value(float("inf")) == "inf"
        assert ex.format_value(float("nan")) == "nan"
        assert ex.format_value(True) == "true"
        assert ex.format_value(7) == "7"

    def test_default_svq_flops(self):
        cfg = ex.ExperimentConfig()
        spec = ex.quantizer_spec(cfg, "svq")
        assert ex.quantizer_flops(spec, cfg.latent_channels) == flops_estimate("svq_mlp", 32, 1024, 128)

    def test_fsq_levels_derivation(self):
        assert ex.fsq_levels_for(ex.ExperimentConfig(), 1024) == (8, 8, 4, 4)
        assert ex.fsq_levels_for(ex.ExperimentConfig(), 256) == (4, 4, 4, 4)
        with pytest.raises(ConfigError):
            ex.fsq_levels_for(ex.ExperimentConfig(), 100)


class TestBenchmark:
    def test_rows_flops_and_determinism(self, tmp_path):
        cfg = tiny()
        names = ["svq", "vq", "svq_raw"]
        path_a, rows = ex.run_quantizer_benchmark(cfg, tmp_path / "a", quantizers=names)
        path_b, _ = ex.run_quantizer_benchmark(cfg, tmp_path / "b", quantizers=names)
        assert open(path_a).read() == open(path_b).read()
        text = open(path_a).read()
        assert text.startswith(f"# config_hash={cfg.config_hash()}\n") and "\r" not in text
        got = ex.read_csv(path_a)
        assert [r["quantizer"] for r in got] == ["none", "svq", "vq", "svq_raw"]
        svq = next(r for r in got if r["quantizer"] == "svq")
        assert int(svq["flops"]) == flops_estimate("svq_mlp", 8, 16, 8)
        raw = ex.read_csv(tmp_path / "a" / "bench_svq_raw.csv")
        assert [float(r["lambda"]) for r in raw] == [0.1, 0.5]
        best = min(raw, key=lambda r: float(r["best_val_loss"]))
        assert next(r for r in got if r["quantizer"] == "svq_raw")["mse"] == best["mse"]
        for name in ("bench_timing.csv", "flops.csv"):
            assert os.path.exists(tmp_path / "a" / name)

    def test_parallel_matches_serial(self):
        cfg = tiny()
        cells = [ex.Cell(i, q, cfg, labels={"quantizer": q}) for i, q in enumerate(["none", "svq"])]
        serial = ex.run_cells(cells, 1)
        parallel = ex.run_cells(cells, 2)
        for a, b in zip(serial, parallel):
            assert a["mse"] == b["mse"]


class TestSweeps:
    def test_noise_zero_row(self, tmp_path):
        _, rows = ex.run_noise_sweep(tiny(), tmp_path)
        zero = rows[0]
        assert zero["eta"] == 0.0
        assert zero["pct_mse_svq"] == 0.0 and zero["pct_mse_base"] == 0.0

    def test_noise_grid_needs_zero(self, tmp_path):
        with pytest.raises(ConfigError):
            ex.run_noise_sweep(tiny(), tmp_path, etas=[0.1])

    def test_one_size_sweep(self, tmp_path):
        path, rows = ex.run_codebook_sweep(tiny(), tmp_path)
        assert len(ex.read_csv(path)) == 2
        assert {r["quantizer"] for r in rows} == {"svq", "grouped_residual_vq"}

    def test_ablation_grid(self):
        cells = ex.ablation_cells(tiny())
        studies = [c.labels["study"] for c in cells]
        assert studies.count("loss") == 4
        assert studies.count("init") == 8
        assert studies.count("frozen") == 2
        assert studies.count("structure") == 2 * len(TINY["ablate_sizes"]) + 3

    def test_frozen_checksum(self, tmp_path):
        cfg = tiny()
        frozen = [c for c in ex.ablation_cells(cfg) if c.labels["study"] == "frozen"]
        for row in ex.run_cells(frozen):
            same = row["init_checksum"] == row["codebook_checksum"]
            assert same == (not row["codebook_learnable"])


class TestCli:
    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert cli.main(["bench", "--config", str(tmp_path / "nope.toml")]) == 2
        assert "error: kind=UsageError" in capsys.readouterr().err

    def test_missing_flag_exit_2(self):
        with pytest.raises(SystemExit) as e:
            cli.main(["bench"])
        assert e.value.code == 2

    def test_unknown_key_exit_1(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("colour = 3\n")
        assert cli.main(["bench", "--config", str(path)]) == 1
        assert "valid keys" in capsys.readouterr().err

    def test_bench_seed_twice_identical(self, config_file, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["bench", "--config", config_file, "--seed", "7", "--quantizer", "svq",
                             "--out", str(out)]) == 0
            outs.append((out / "bench.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_covering_one_dimension(self, tmp_path):
        path = tmp_path / "cov.toml"
        path.write_text("covering_dims = [1]\ncovering_deltas = [0.6]\ncovering_grid = [1, 2, 4]\n")
        assert cli.main(["covering", "--config", str(path), "--out", str(tmp_path)]) == 0
        rows = ex.read_csv(tmp_path / "covering.csv")
        clustering = [r for r in rows if r["method"] == "clustering"]
        assert [r["m_star"] for r in clustering] == ["2"] * 3
        assert float(clustering[0]["error"]) >= 0.6 and float(clustering[1]["error"]) < 0.6

    def test_train_export_eval(self, config_file, tmp_path):
        out = str(tmp_path)
        assert cli.main(["train", "--config", config_file, "--out", out]) == 0
        report = ex.read_csv(tmp_path / "train_report.csv")
        assert list(report[0]) == ex.REPORT_COLUMNS
        assert cli.main(["export-codebook", "--config", config_file, "--out", out]) == 0
        codebook = np.loadtxt(tmp_path / "codebook.csv", delimiter=",", skiprows=1)
        assert codebook.shape == (16, 8)
        assert cli.main(["eval", "--config", config_file, "--out", out]) == 0
        row = ex.read_csv(tmp_path / "eval.csv")[0]
        model, _, _ = ex.load_checkpoint(os.path.join(out, "model"))
        assert row["quantizer"] == "svq" and float(row["mse"]) > 0

    def test_export_needs_svq(self, config_file, tmp_path, capsys):
        out = str(tmp_path)
        assert cli.main(["train", "--config", config_file, "--out", out, "--quantizer", "vq"]) == 0
        assert cli.main(["export-codebook", "--config", config_file, "--out", out]) == 1
        assert "no SVQ codebook" in capsys.readouterr().err
