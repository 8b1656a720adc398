"""Tests for otafl/settings.py."""
from __future__ import annotations

import math

import pytest

from otafl.errors import ConfigError
from otafl.settings import (ENV_MAX_WORKERS, ENV_OUTPUT_ROOT, ExperimentConfig, describe_schema,
                            load_config, max_workers, output_root, parse_config)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class TestParseConfig:
    def test_empty_text_gives_defaults(self):
        assert parse_config("") == ExperimentConfig()

    def test_schema_text_round_trips(self):
        assert parse_config(describe_schema()) == ExperimentConfig()

    def test_values_and_expressions(self):
        config = parse_config("case=II\ntheta_th=pi/4\nb_max=sqrt(5),1.5\nnum_devices=2\n"
                              "seeds=0-2,7\nstrategy=normalized, ideal\ntarget_s=0.9\n")
        assert config.case == "II"
        assert config.theta_th == pytest.approx(math.pi / 4)
        assert config.b_max == pytest.approx((math.sqrt(5.0), 1.5))
        assert config.seeds == (0, 1, 2, 7)
        assert config.strategy == ("normalized", "ideal")
        assert config.case2_target == {"s": 0.9}

    def test_comments_quotes_and_export(self):
        config = parse_config('# a comment\nexport rounds=12\ntask="ridge"\n')
        assert config.rounds == 12 and config.task == "ridge"

    def test_default_case2_target(self):
        assert parse_config("case=II").case2_target == {"eps": 0.1}

    def test_overrides_win(self):
        config = parse_config("rounds=10\n", {"rounds": "20", "compare_unoptimized": "yes"})
        assert config.rounds == 20 and config.compare_unoptimized


class TestConfigErrors:
    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("case=I\nbogus=1\n")
        assert info.value.line == 2 and info.value.key == "bogus"
        assert "line 2" in str(info.value)

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate") as info:
            parse_config("rounds=1\nrounds=2\n")
        assert info.value.line == 2

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config("num_devices=zero\n")
        assert info.value.key == "num_devices" and info.value.line == 1

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("", {"speed": "1"})

    @pytest.mark.parametrize("text, key", [
        ("p=0.4", "p"),
        ("case=II\ntask=classifier", "task"),
        ("target_s=0.5\ntarget_eps=0.1", "target_s"),
        ("target_s=1.5", "target_s"),
        ("num_devices=3\nb_max=1,2", "b_max"),
        ("theta_th=pi/2", "theta_th"),
        ("skew=2", "skew"),
        ("test_fraction=1", "test_fraction"),
        ("task=idx", "task"),
    ])
    def test_cross_field_checks(self, text, key):
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.key == key

    @pytest.mark.parametrize("value", ["3-1", "1,1", "-2"])
    def test_bad_seeds(self, value):
        with pytest.raises(ConfigError):
            parse_config(f"seeds={value}")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.env")


# ---------------------------------------------------------------------------
# Fingerprint and environment
# ---------------------------------------------------------------------------

class TestFingerprint:
    def test_stable_hex(self):
        fp = ExperimentConfig().fingerprint()
        assert len(fp) == 64 and fp == ExperimentConfig().fingerprint()

    def test_changes_with_results_relevant_keys(self):
        assert ExperimentConfig().fingerprint() != ExperimentConfig(rounds=501).fingerprint()

    def test_ignores_output_dir(self):
        assert (ExperimentConfig().fingerprint()
                == ExperimentConfig(output_dir="elsewhere").fingerprint())

    def test_replace_revalidates(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().replace(p=2.0)


class TestEnvironment:
    def test_output_root_from_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path / "out"))
        assert output_root() == tmp_path / "out"
        assert ExperimentConfig().output_path() == tmp_path / "out"

    def test_output_dir_overrides_env(self):
        assert str(ExperimentConfig(output_dir="runs/a").output_path()) == "runs/a"

    def test_max_workers(self, monkeypatch):
        monkeypatch.setenv(ENV_MAX_WORKERS, "3")
        assert max_workers() == 3
        monkeypatch.delenv(ENV_MAX_WORKERS)
        assert max_workers() == 4

    def test_bad_max_workers(self, monkeypatch):
        monkeypatch.setenv(ENV_MAX_WORKERS, "many")
        with pytest.raises(ConfigError):
            max_workers()

    def test_load_config_file(self, tmp_path, tiny_config_text):
        path = tmp_path / "tiny.env"
        path.write_text(tiny_config_text)
        config = load_config(path, {"rounds": "7"})
        assert config.num_devices == 4 and config.rounds == 7 and config.seeds == (0, 1)
