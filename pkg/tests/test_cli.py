import json
from pathlib import Path

import numpy as np
import pytest

from videoground import cli
from videoground.cli import CliError, load_config


TINY_YAML = """
world:
  frames: 4
  grid: [3, 3]
  dim: 16
  span_min: 1
  span_max: 2
model:
  dim: 16
  heads: 2
  n_encoder_iters: 1
  n_decoder_layers: 1
  queries_per_frame: 2
  sim_dim: 8
  proposal_scales: [4, 2]
train:
  learning_rate: 0.001
  epochs: 1
  steps_per_epoch: 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(TINY_YAML)
    return str(path)


class TestLoadConfig:
    def test_sections_built(self, tiny_config):
        world, model, train = load_config(tiny_config)
        assert world.frames == 4
        assert model.proposal_scales == (4, 2)
        assert train.steps_per_epoch == 3

    def test_defaults_without_file(self):
        world, model, train = load_config(None)
        assert world.frames == 8
        assert model.dim == 64

    def test_overrides(self, tiny_config):
        _, model, train = load_config(
            tiny_config, overrides=["model.heads=4", "train.seed=9"])
        assert model.heads == 4
        assert train.seed == 9

    def test_seed_argument_wins(self, tiny_config):
        _, _, train = load_config(tiny_config, seed=31)
        assert train.seed == 31

    def test_seed_env_var(self, tiny_config, monkeypatch):
        monkeypatch.setenv("VIDEOGROUND_SEED", "17")
        _, _, train = load_config(tiny_config)
        assert train.seed == 17
        monkeypatch.setenv("VIDEOGROUND_SEED", "not-a-number")
        with pytest.raises(CliError):
            load_config(tiny_config)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model:\n  heds: 4\n")
        with pytest.raises(CliError):
            load_config(str(path))

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("optimizer:\n  lr: 1\n")
        with pytest.raises(CliError):
            load_config(str(path))

    def test_invalid_yaml_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed\n")
        with pytest.raises(CliError):
            load_config(str(path))

    def test_malformed_override_rejected(self, tiny_config):
        with pytest.raises(CliError):
            load_config(tiny_config, overrides=["heads=4"])


class TestCommands:
    def test_train_eval_round_trip(self, tiny_config, tmp_path, capsys):
        ckpt = str(tmp_path / "m.npz")
        report = str(tmp_path / "r.json")
        assert cli.main(["train", "--config", tiny_config, "--seed", "0",
                         "--checkpoint", ckpt]) == 0
        assert cli.main(["eval", "--checkpoint", ckpt, "--count", "3",
                         "--seed", "0", "--json", report]) == 0
        out = capsys.readouterr().out
        assert "0.4" in out and "Avg" in out
        payload = json.loads(Path(report).read_text())
        assert set(payload["accuracies"]) == {"0.4", "0.5", "0.6"}
        assert payload["episode_count"] == 3

    def test_eval_deterministic(self, tiny_config, tmp_path):
        ckpt = str(tmp_path / "m.npz")
        cli.main(["train", "--config", tiny_config, "--seed", "1",
                  "--checkpoint", ckpt])
        reports = []
        for i in range(2):
            out = tmp_path / f"r{i}.json"
            assert cli.main(["eval", "--checkpoint", ckpt, "--count", "4",
                             "--seed", "5", "--json", str(out)]) == 0
            reports.append(out.read_bytes())
        assert reports[0] == reports[1]

    def test_gen_data_and_eval_on_dump(self, tiny_config, tmp_path):
        ckpt = str(tmp_path / "m.npz")
        prefix = str(tmp_path / "eps")
        cli.main(["train", "--config", tiny_config, "--seed", "2",
                  "--checkpoint", ckpt])
        assert cli.main(["gen-data", "--config", tiny_config, "--seed", "2",
                         "--out", prefix, "--count", "3"]) == 0
        assert Path(prefix + ".json").exists()
        assert Path(prefix + ".npz").exists()
        assert cli.main(["eval", "--checkpoint", ckpt,
                         "--episodes", prefix]) == 0

    def test_missing_config_is_usage_error(self, tmp_path):
        assert cli.main(["train", "--config",
                         str(tmp_path / "nope.yaml")]) == 2

    def test_mismatched_dump_is_usage_error(self, tiny_config, tmp_path):
        ckpt = str(tmp_path / "m.npz")
        prefix = str(tmp_path / "eps")
        cli.main(["train", "--config", tiny_config, "--seed", "0",
                  "--checkpoint", ckpt])
        assert cli.main(["gen-data", "--config", tiny_config,
                         "--set", "world.frames=6",
                         "--out", prefix, "--count", "2"]) == 0
        assert cli.main(["eval", "--checkpoint", ckpt,
                         "--episodes", prefix]) == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--frobnicate"])
        assert exc.value.code == 2

    def test_ablate_table(self, tiny_config, tmp_path, capsys):
        out = str(tmp_path / "ablate.json")
        assert cli.main(["ablate", "--config", tiny_config, "--seed", "0",
                         "--variants", "full,no-shifted", "--steps", "2",
                         "--episodes", "2", "--json", out]) == 0
        text = capsys.readouterr().out
        assert "full" in text and "no-shifted" in text
        payload = json.loads(Path(out).read_text())
        assert set(payload) == {"full", "no-shifted"}

    def test_ablate_unknown_variant_rejected(self, tiny_config):
        assert cli.main(["ablate", "--config", tiny_config,
                         "--variants", "no-everything"]) == 2

    def test_gradcheck_exit_codes(self):
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        # an absurd tolerance cannot be met; the command must signal failure
        assert cli.main(["gradcheck", "--seed", "0",
                         "--tolerance", "1e-30"]) == 1
