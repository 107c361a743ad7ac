"""End-to-end tests of the experiment driver: config parsing, stage commands,
artifact formats, and determinism."""

import csv
import json
import os

import numpy as np
import pytest

from sdeonet.cli import (
    cmd_decompose,
    cmd_evaluate,
    cmd_pce,
    cmd_simulate,
    cmd_train,
    load_config,
    main,
    stage_seed,
)
from sdeonet.pce_ref import CoefficientTable
from sdeonet.sde_lab import load_dataset


SMOKE_CONFIG = """
[experiment]
process = ou
seed = 7
out_dir = {out}

[model]
m = 8
p = 6
hidden = 16,16

[train]
n_samples = 120
epochs = 2
batch_size = 32
sim_level = 8

[eval]
grid_size = 5
n_eval = 100
realisations = 2

[pce]
table_degree = 2
table_basis = 4
n_t = 65
ode_step = 1e-2

[decompose]
n_eval = 150
reference_degree = 2
p_sweep = 1,2,4
"""


def write_config(tmp_path, text=None, **extra):
    import configparser

    out = tmp_path / "run"
    cfg_path = tmp_path / "exp.ini"
    parser = configparser.ConfigParser()
    parser.read_string((text or SMOKE_CONFIG).format(out=str(out)))
    for section, kv in extra.items():
        if not parser.has_section(section):
            parser.add_section(section)
        for key, value in kv.items():
            parser[section][key] = str(value)
    with open(cfg_path, "w") as handle:
        parser.write(handle)
    return str(cfg_path), str(out)


class TestConfig:
    def test_defaults_resolve(self):
        config = load_config(None)
        assert config.process == "ou"
        assert config.basis_size == 32 and config.n_terms == 64
        assert config.hidden == (256, 256)
        assert config.train.epochs == 30 and config.train.batch_size == 64
        assert config.train.learning_rate == pytest.approx(3e-4)

    def test_langevin_defaults(self, tmp_path):
        cfg_path, _ = write_config(tmp_path, experiment={"process": "langevin"})
        config = load_config(cfg_path)
        assert config.spec.dim == 5
        np.testing.assert_array_equal(config.spec.mean, [0.0, -2.0, 4.0, -6.0, 8.0])
        np.testing.assert_array_equal(config.spec.covariance, np.eye(5))

    def test_seed_override(self, tmp_path):
        cfg_path, _ = write_config(tmp_path)
        config = load_config(cfg_path, seed_override=99)
        assert config.seed == 99

    def test_unknown_process_rejected(self, tmp_path):
        cfg_path, _ = write_config(tmp_path, experiment={"process": "cir"})
        with pytest.raises(ValueError):
            load_config(cfg_path)

    def test_stage_seeds_distinct_and_stable(self):
        seeds = {stage: stage_seed(1, stage) for stage in ("simulate", "train", "evaluate")}
        assert len(set(seeds.values())) == 3
        assert stage_seed(1, "train") == seeds["train"]


class TestSimulate:
    def test_row_count_and_header(self, tmp_path):
        cfg_path, out = write_config(tmp_path, train={"n_samples": "10"})
        config = load_config(cfg_path)
        path = cmd_simulate(config)
        lines = open(path).read().strip().splitlines()
        assert len(lines) == 11
        assert lines[0].startswith("path_id,t,x_0,g_0")

    def test_rerun_byte_identical(self, tmp_path):
        cfg_path, out = write_config(tmp_path, train={"n_samples": "15"})
        config = load_config(cfg_path)
        first = open(cmd_simulate(config), "rb").read()
        second = open(cmd_simulate(config), "rb").read()
        assert first == second

    def test_rows_satisfy_closed_form(self, tmp_path):
        cfg_path, out = write_config(
            tmp_path, experiment={"process": "gbm"}, train={"n_samples": "12"}
        )
        config = load_config(cfg_path)
        samples = load_dataset(cmd_simulate(config))
        from sdeonet.sde_lab import sample_brownian, sample_rng

        spec = config.spec
        seed = stage_seed(config.seed, "simulate")
        for s in samples:
            path = sample_brownian(config.sim_level, spec.horizon, 1, sample_rng(seed, s.path_id))
            w_t = path.values[0][path.grid_index(s.t)]
            want = spec.x0 * np.exp((spec.mu - spec.sigma**2 / 2) * s.t + spec.sigma * w_t)
            assert s.x[0] == pytest.approx(want, rel=1e-12)


class TestTrainStage:
    def test_history_rows_and_checkpoint(self, tmp_path):
        cfg_path, out = write_config(tmp_path)
        config = load_config(cfg_path)
        cmd_simulate(config)
        checkpoint = cmd_train(config)
        assert os.path.exists(checkpoint)
        rows = list(csv.reader(open(os.path.join(out, "loss_history.csv"))))
        assert rows[0] == ["epoch", "loss"]
        assert len(rows) == 3  # header + 2 epochs
        assert float(rows[2][1]) < float(rows[1][1])

    def test_single_epoch_history(self, tmp_path):
        cfg_path, out = write_config(tmp_path, train={"epochs": "1", "n_samples": "64"})
        config = load_config(cfg_path)
        cmd_simulate(config)
        cmd_train(config)
        rows = list(csv.reader(open(os.path.join(out, "loss_history.csv"))))
        assert len(rows) == 2


class TestEvaluateStage:
    def test_columns_and_shape(self, tmp_path):
        cfg_path, out = write_config(tmp_path)
        config = load_config(cfg_path)
        cmd_simulate(config)
        cmd_train(config)
        path = cmd_evaluate(config)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["t", "l2_mean", "l2_3sig", "rel_mean", "rel_3sig", "w2_mean", "w2_3sig"]
        assert len(rows) == 5  # header + (grid_size - 1) times
        values = np.array([[float(v) for v in row] for row in rows[1:]])
        assert np.all(np.isfinite(values))

    def test_missing_checkpoint(self, tmp_path):
        cfg_path, out = write_config(tmp_path)
        config = load_config(cfg_path)
        with pytest.raises(FileNotFoundError):
            cmd_evaluate(config)

    def test_checkpoint_round_trip_same_metrics(self, tmp_path):
        cfg_path, out = write_config(tmp_path)
        config = load_config(cfg_path)
        cmd_simulate(config)
        cmd_train(config)
        first = open(cmd_evaluate(config), "rb").read()
        second = open(cmd_evaluate(config), "rb").read()
        assert first == second


class TestPceStage:
    def test_table_and_defect(self, tmp_path):
        cfg_path, out = write_config(tmp_path, experiment={"process": "gbm"})
        config = load_config(cfg_path)
        table_path, defect_path = cmd_pce(config)
        table = CoefficientTable.load_csv(table_path)
        assert len(table.indices) == 15  # binomial(2 + 4, 4)
        rows = list(csv.reader(open(defect_path)))
        assert rows[0] == ["t", "retained_energy", "second_moment", "defect"]
        defects = [float(r[3]) for r in rows[1:]]
        assert max(defects) <= 0.05

    def test_langevin_rejected(self, tmp_path):
        cfg_path, out = write_config(tmp_path, experiment={"process": "langevin"})
        config = load_config(cfg_path)
        with pytest.raises(ValueError):
            cmd_pce(config)


class TestDecomposeStage:
    def test_sweep_rows_and_monotone_trunc(self, tmp_path):
        cfg_path, out = write_config(tmp_path)
        config = load_config(cfg_path)
        cmd_simulate(config)
        cmd_train(config)
        path = cmd_decompose(config)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["p", "e_trunc", "e_approx", "e_recon", "e_total", "mc_se"]
        p_vals = [int(r[0]) for r in rows[1:]]
        assert p_vals == [1, 2, 4]
        e_trunc = [float(r[1]) for r in rows[1:]]
        assert all(b <= a + 1e-9 for a, b in zip(e_trunc, e_trunc[1:]))


class TestMainEntry:
    def test_full_pipeline_exit_zero(self, tmp_path, capsys):
        cfg_path, out = write_config(tmp_path)
        assert main(["all", "--config", cfg_path]) == 0
        for artifact in (
            "dataset.csv",
            "model.npz",
            "loss_history.csv",
            "metrics.csv",
            "coefficients.csv",
            "parseval.csv",
            "decomposition.csv",
        ):
            assert os.path.exists(os.path.join(out, artifact)), artifact

    def test_error_line_machine_readable(self, tmp_path, capsys):
        cfg_path, out = write_config(tmp_path, experiment={"process": "langevin"})
        code = main(["pce", "--config", cfg_path])
        captured = capsys.readouterr()
        assert code == 1
        line = captured.err.strip()
        assert line.startswith("error: ")
        payload = json.loads(line[len("error: ") :])
        assert payload["type"] == "ValueError"

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["simulate", "--config", str(tmp_path / "nope.ini")])
        assert code == 1
