import json
import os

import numpy as np
import pytest

from dynfed.algorithms import AlgorithmKind
from dynfed.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_VERIFY_FAILED,
    ConfigError,
    emit_config,
    main,
    parse_config,
    parse_config_text,
)

MINIMAL = """
[algorithm]
kind = feddyn

[data]
mode = homogeneous
"""

TINY_RUN = """
[data]
devices = 5
avg_samples = 24
features = 4
classes = 3

[algorithm]
kind = feddyn
alpha = 0.1

[solver]
lr = 0.1
epochs = 1
batch = 8

[run]
name = tiny
rounds = 4
seed = 7
"""


def write(tmp_path, text, name="config.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestParse:
    def test_minimal_defaults(self, tmp_path):
        cfg = parse_config(write(tmp_path, MINIMAL))
        assert cfg.algorithm.kind is AlgorithmKind.FEDDYN
        assert cfg.algorithm.alpha == 0.01
        assert cfg.participation == 1.0
        assert cfg.rounds == 100
        assert cfg.data.source == "synthetic"

    def test_zero_participation_rejected_with_message(self, tmp_path):
        path = write(tmp_path, MINIMAL + "\n[run]\nparticipation = 0\n")
        with pytest.raises(ConfigError, match="participation must yield >= 1 device"):
            parse_config(path)

    def test_alpha_not_required_for_fedavg(self, tmp_path):
        cfg = parse_config(write(tmp_path, "[algorithm]\nkind = fedavg\n"))
        assert cfg.algorithm.kind is AlgorithmKind.FEDAVG

    def test_unknown_key_named_in_error(self, tmp_path):
        path = write(tmp_path, "[run]\nruonds = 10\n")
        with pytest.raises(ConfigError, match="ruonds"):
            parse_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="nonsense"):
            parse_config(write(tmp_path, "[nonsense]\nx = 1\n"))

    def test_override_round_trips(self, tmp_path):
        path = write(tmp_path, MINIMAL)
        cfg = parse_config(path, ["algorithm.alpha=0.25", "run.rounds=7"])
        assert cfg.algorithm.alpha == 0.25 and cfg.rounds == 7

    def test_bad_override_target(self, tmp_path):
        with pytest.raises(ConfigError, match="algorithm.bogus"):
            parse_config(write(tmp_path, MINIMAL), ["algorithm.bogus=1"])

    def test_emit_parse_round_trip(self, tmp_path):
        cfg = parse_config(write(tmp_path, TINY_RUN),
                           ["solver.grad_clip_norm=none", "algorithm.kind=scaffold",
                            "algorithm.scaffold_steps=12"])
        again = parse_config_text(emit_config(cfg))
        assert again == cfg


class TestRunVerb:
    def test_run_writes_artifact_directory(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        assert main(["run", config, "--out", str(tmp_path / "out")]) == EXIT_OK
        run_dir = tmp_path / "out" / "tiny"
        for artifact in ("manifest.json", "rounds.csv", "summary.csv",
                         "shards/meta.json", "shards/shard_0_features.csv"):
            assert (run_dir / artifact).exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["status"] == "ok"
        assert manifest["seed"] == 7
        assert manifest["participants_per_round"] == 5
        assert "config_ini" in manifest

    def test_out_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DYNFED_OUT", str(tmp_path / "envout"))
        monkeypatch.chdir(tmp_path)
        assert main(["run", write(tmp_path, TINY_RUN)]) == EXIT_OK
        assert (tmp_path / "envout" / "tiny" / "rounds.csv").exists()

    def test_divergence_exit_code_and_flush(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["run", config, "--out", str(tmp_path / "out"),
                         "--set", "solver.lr=1e18", "--set", "solver.epochs=5000",
                         "--set", "solver.grad_clip_norm=none",
                         "--set", "run.name=boom"])
        assert code == EXIT_DIVERGED
        run_dir = tmp_path / "out" / "boom"
        assert (run_dir / "rounds.csv").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["status"].startswith("diverged")

    def test_config_error_exit_code(self, tmp_path):
        config = write(tmp_path, "[run]\nbogus_key = 1\n")
        assert main(["run", config, "--out", str(tmp_path / "out")]) == EXIT_CONFIG


class TestVerifyVerb:
    def test_verify_passes_on_fresh_run(self, tmp_path, capsys):
        config = write(tmp_path, TINY_RUN)
        assert main(["run", config, "--out", str(tmp_path / "out")]) == EXIT_OK
        assert main(["verify", str(tmp_path / "out" / "tiny")]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert sum(line.startswith("PASS") for line in lines) == 3

    def test_verify_fails_on_tampered_records(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        main(["run", config, "--out", str(tmp_path / "out")])
        rounds = tmp_path / "out" / "tiny" / "rounds.csv"
        rounds.write_text(rounds.read_text().replace("0.0", "0.1"))
        assert main(["verify", str(tmp_path / "out" / "tiny")]) == EXIT_VERIFY_FAILED


class TestSweepVerb:
    def test_sweep_runs_each_value(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        code = main(["sweep", config, "--parameter", "alpha",
                     "--values", "0.05,0.5", "--out", str(tmp_path / "out"),
                     "--name", "alpha-sweep"])
        assert code == EXIT_OK
        root = tmp_path / "out" / "alpha-sweep"
        assert (root / "alpha=0.05" / "rounds.csv").exists()
        assert (root / "alpha=0.5" / "rounds.csv").exists()
        summary = (root / "sweep_summary.csv").read_text().strip().splitlines()
        assert summary[0].startswith("alpha,")
        assert len(summary) == 3

    def test_empty_values_rejected(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        code = main(["sweep", config, "--parameter", "alpha", "--values", "",
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_CONFIG

    def test_child_error_recorded_and_sweep_continues(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["sweep", config, "--parameter", "lr",
                         "--values", "0.05,1e18", "--out", str(tmp_path / "out"),
                         "--set", "solver.grad_clip_norm=none",
                         "--set", "solver.epochs=5000",
                         "--name", "lr-sweep"])
        assert code == EXIT_OK
        summary = (tmp_path / "out" / "lr-sweep" / "sweep_summary.csv").read_text()
        assert "diverged" in summary
        assert "0.05,ok" in summary

    def test_single_value_sweep_matches_plain_run(self, tmp_path):
        config = write(tmp_path, TINY_RUN)
        main(["run", config, "--out", str(tmp_path / "plain"),
              "--set", "algorithm.alpha=0.2"])
        main(["sweep", config, "--parameter", "alpha", "--values", "0.2",
              "--out", str(tmp_path / "out"), "--name", "solo"])
        plain = (tmp_path / "plain" / "tiny" / "rounds.csv").read_bytes()
        swept = (tmp_path / "out" / "solo" / "alpha=0.2" / "rounds.csv").read_bytes()
        assert plain == swept


def test_gen_data_writes_shards(tmp_path):
    config = write(tmp_path, TINY_RUN)
    assert main(["gen-data", config, "--out", str(tmp_path / "out")]) == EXIT_OK
    shards = tmp_path / "out" / "tiny" / "shards"
    meta = json.loads((shards / "meta.json").read_text())
    assert meta["devices"] == 5
    assert (shards / "shard_4_labels.csv").exists()
