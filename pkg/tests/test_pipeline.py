from pathlib import Path

import numpy as np
import pytest
import yaml

from semtok import pipeline as pl
from semtok.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, EXIT_STAGE, main
from semtok.config import ConfigError, PROFILES, build_config, config_text, load_config, parse_overrides
from semtok.trainer import load_model


def smoke(out_dir, *overrides):
    return load_config(None, [f"out_dir={out_dir}", *overrides], profile="smoke")


def csv_files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    pl.run_pipeline(smoke(root))
    return root


class TestConfig:
    def test_defaults_validate(self):
        cfg = build_config({})
        assert cfg.model.num_tokens == 66 and cfg.train.lambda_s == 2.0

    def test_profile_then_overrides(self):
        cfg = load_config(None, ["train.epochs=7", "seed=3"], profile="reference")
        assert cfg.train.epochs == 7 and cfg.train.pretrain_epochs == 30
        assert cfg.model.patch == 8 and cfg.seed == 3
        assert cfg.train.seed == 3 and cfg.data.seed == 3

    def test_exponent_floats_without_dot(self):
        assert load_config(None, ["train.lr=1e-2"]).train.lr == 0.01

    def test_lists_become_tuples(self):
        cfg = load_config(None, ["controller.V_grid=[1, 2]"])
        assert cfg.controller.V_grid == (1, 2)

    def test_file_merged_under_overrides(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("profile: smoke\ntrain:\n  epochs: 5\n  lr: 0.01\n")
        cfg = load_config(path, ["train.epochs=1"])
        assert (cfg.train.epochs, cfg.train.lr, cfg.train.pretrain_epochs) == (1, 0.01, 2)

    def test_dump_round_trips(self):
        cfg = load_config(None, ["train.epochs=4"], profile="smoke")
        assert build_config(yaml.safe_load(config_text(cfg))) == cfg

    @pytest.mark.parametrize("items", [["nonsense=1"], ["train.bogus=1"], ["train.epochs"],
                                       ["model.patch=5"], ["data.num_classes=3"], ["train.regime=x"],
                                       ["regimes=[noiseless]"], ["train.ratios=[0.5, 0.25]"]])
    def test_bad_values_rejected(self, items):
        with pytest.raises(ConfigError):
            load_config(None, items)

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, [], profile="huge")

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_parse_overrides_nested(self):
        assert parse_overrides(["a.b.c=1", "a.d=x"]) == {"a": {"b": {"c": 1}, "d": "x"}}

    def test_profiles_known(self):
        assert set(PROFILES) == {"reference", "smoke"}


class TestPipeline:
    def test_outputs_present(self, smoke_run):
        reports = smoke_run / "reports"
        for name in ("summary.csv", "proxy.csv", "tune.csv", "baselines.csv"):
            assert (reports / name).exists()
        assert (smoke_run / "robust" / "model.ckpt").exists()
        assert (smoke_run / "noiseless" / "metrics.csv").exists()
        assert list(reports.glob("trace_rho*.csv"))

    def test_rerun_is_byte_identical(self, smoke_run, tmp_path):
        pl.run_pipeline(smoke(tmp_path))
        first, second = csv_files(smoke_run), csv_files(tmp_path)
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name

    def test_other_seed_differs(self, smoke_run, tmp_path):
        pl.run_pipeline(smoke(tmp_path, "seed=1"))
        a = (smoke_run / "data" / "train.raster").read_bytes()
        assert a != (tmp_path / "data" / "train.raster").read_bytes()

    def test_summary_header_and_rows(self, smoke_run):
        rows = pl.read_rows(smoke_run / "reports" / "summary.csv")
        cfg = smoke(smoke_run)
        assert tuple(rows[0]) == pl.SUMMARY_FIELDS
        assert len(rows) == (len(cfg.regimes) * len(cfg.train.ratios) * len(cfg.eval.alpha_grid)
                             * len(cfg.eval.snrs))

    def test_stage_failure_names_stage(self, tmp_path):
        (tmp_path / "data").write_text("not a directory")
        with pytest.raises(pl.StageError) as info:
            pl.run_pipeline(smoke(tmp_path))
        assert info.value.stage == "gen-data"
        assert "cannot create" in str(info.value)

    def test_mask_export(self, smoke_run):
        model, _ = load_model(smoke_run / "robust" / "model.ckpt")
        _, test_set = pl.load_data(smoke(smoke_run))
        recs = pl.export_masks(model, test_set.images[:2], [0.5, 1.0])
        assert len(recs) == 2 * 2 * model.config.split
        for rec in recs:
            np.testing.assert_array_equal(rec.retained, rec.mask > 0)
        # masks only shrink from block to block
        for a, b in zip(recs[::2], recs[1::2]):
            assert np.all(b.mask <= a.mask + 1e-12)


class TestCli:
    def test_show_config(self, capsys):
        assert main(["show-config", "--profile", "smoke", "--seed", "4"]) == EXIT_OK
        assert yaml.safe_load(capsys.readouterr().out)["seed"] == 4

    def test_bad_override_exit_one(self, capsys):
        assert main(["show-config", "--set", "train.bogus=1"]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_checkpoint_exit_two(self, tmp_path, capsys):
        assert main(["eval", "--profile", "smoke", "--out-dir", str(tmp_path)]) == EXIT_STAGE
        assert "eval" in capsys.readouterr().err

    def test_infeasible_exit_three(self, smoke_run, tmp_path):
        (tmp_path / "reports").mkdir()
        (tmp_path / "reports" / "proxy.csv").write_bytes((smoke_run / "reports" / "proxy.csv").read_bytes())
        args = ["--profile", "smoke", "--out-dir", str(tmp_path)]
        assert main(["tune", *args, "--set", "controller.rho_th_grid=[1e-9]"]) == EXIT_INFEASIBLE
        assert main(["run-controller", *args, "--rho-th", "1e-9", "--V", "1", "--mu", "1"]) == EXIT_INFEASIBLE

    def test_stagewise_commands_match_pipeline(self, smoke_run, tmp_path):
        args = ["--profile", "smoke", "--out-dir", str(tmp_path)]
        for cmd in ("gen-data", "train", "eval", "build-proxy", "tune", "run-controller", "baseline"):
            assert main([cmd, *args]) == EXIT_OK, cmd
        first, second = csv_files(smoke_run / "reports"), csv_files(tmp_path / "reports")
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], name

    def test_export_masks_command(self, smoke_run, tmp_path):
        for sub in ("data", "robust"):
            (tmp_path / sub).mkdir()
        for name in ("data/train.raster", "data/test.raster", "robust/model.ckpt"):
            (tmp_path / name).write_bytes((smoke_run / name).read_bytes())
        assert main(["export-masks", "--profile", "smoke", "--out-dir", str(tmp_path), "--count", "2",
                     "--alphas", "0.5"]) == EXIT_OK
        lines = (tmp_path / "reports" / "masks.csv").read_text().splitlines()
        assert lines[0] == ",".join(pl.MASK_FIELDS)
        cfg = smoke(tmp_path)
        assert len(lines) - 1 == 2 * cfg.model.split * cfg.model.num_patches
