"""End-to-end tests for the otafl command line."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import pytest

from otafl.artifacts import MEANS_FILE, REPORTS_DIR, SOLVER_FILE, load_traces, read_json
from otafl.cli import EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger = logging.getLogger("otafl")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)


@pytest.fixture
def tiny_config(tmp_path, tiny_config_text):
    path = tmp_path / "tiny.env"
    path.write_text(tiny_config_text)
    return path


# ---------------------------------------------------------------------------
# optimize / oracle / schema
# ---------------------------------------------------------------------------

class TestOptimize:
    def test_writes_solver_document(self, tmp_path, capsys):
        out = tmp_path / "opt"
        assert main(["optimize", "--out", str(out)]) == EXIT_OK
        doc = read_json(out / SOLVER_FILE)
        assert set(doc) >= {"fingerprint", "config", "channel", "artifacts", "plans"}
        assert "case1" in doc["plans"]
        assert doc["artifacts"]["Z"] >= 1.0
        assert "Z          =" in capsys.readouterr().out

    def test_unknown_key_is_a_config_error(self, tmp_path, capsys):
        assert main(["optimize", "--out", str(tmp_path), "--set", "bogus=1"]) == EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_malformed_override(self, tmp_path):
        assert main(["optimize", "--out", str(tmp_path), "--set", "rounds"]) == EXIT_CONFIG

    def test_with_oracle(self, tmp_path, capsys):
        code = main(["optimize", "--out", str(tmp_path), "--set", "num_devices=2",
                     "--oracle", "--grid", "50"])
        assert code == EXIT_OK
        assert "oracle Z" in capsys.readouterr().out


class TestOracle:
    def test_small_system(self, capsys):
        assert main(["oracle", "--set", "num_devices=2", "--grid", "50"]) == EXIT_OK
        assert "relative" in capsys.readouterr().out

    def test_refuses_many_devices(self):
        assert main(["oracle", "--set", "num_devices=5"]) == EXIT_CONFIG


class TestSchema:
    def test_prints_defaults(self, capsys):
        assert main(["schema"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "rounds=500" in text.splitlines()
        assert "case=I" in text.splitlines()


# ---------------------------------------------------------------------------
# train / sweep / bounds
# ---------------------------------------------------------------------------

class TestTrain:
    def test_reruns_are_byte_identical(self, tmp_path, tiny_config):
        for name in ("a", "b"):
            assert main(["train", "--config", str(tiny_config), "--out",
                         str(tmp_path / name)]) == EXIT_OK
        files = sorted(p.relative_to(tmp_path / "a")
                       for p in (tmp_path / "a").rglob("*.csv"))
        assert len(files) == 2 + 1
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_default_output_root(self, tmp_path, tiny_config):
        assert main(["train", "--config", str(tiny_config)]) == EXIT_OK
        assert (tmp_path / "artifacts" / MEANS_FILE).exists()

    def test_strategy_flag(self, tmp_path, tiny_config):
        out = tmp_path / "out"
        assert main(["train", "--config", str(tiny_config), "--out", str(out),
                     "--strategy", "normalized,ideal"]) == EXIT_OK
        assert set(load_traces(out)) == {"case1/normalized", "case1/ideal"}


class TestSweepCommand:
    def test_writes_comparisons(self, tmp_path, tiny_config):
        out = tmp_path / "sweep"
        code = main(["sweep", "--config", str(tiny_config), "--out", str(out),
                     "--strategy", "normalized,standardized", "--set", "target_s=0.9"])
        assert code == EXIT_OK
        groups = load_traces(out)
        assert {"case1/normalized", "case2/normalized"} <= set(groups)
        comparisons = read_json(out / "comparison.json")["comparisons"]
        assert {"better": "case1/normalized", "than": "case1/standardized"} in [
            {"better": c["better"], "than": c["than"]} for c in comparisons]


@pytest.mark.slow
class TestCaseIIFlow:
    """Train Case II on the default system, then check the saved traces."""

    ARGS = ["--set", "case=II", "--set", "seeds=0-19", "--set", "rounds=300"]

    def test_train_then_bounds(self, tmp_path):
        out = str(tmp_path / "case2")
        assert main(["train", *self.ARGS, "--out", out]) == EXIT_OK
        assert main(["bounds", *self.ARGS, "--out", out]) == EXIT_OK
        report = tmp_path / "case2" / REPORTS_DIR / "case2-normalized-strongly_convex.json"
        summary = read_json(report)
        assert summary["passed"]

        groups = load_traces(tmp_path / "case2")
        traces = groups["case2/normalized"]
        gaps = np.array([tr.column("gap") for tr in traces]).mean(axis=0)
        assert gaps[-1] < gaps[0]

        # inflate every recorded loss so the measured gap exceeds the bound
        for path in (tmp_path / "case2").rglob("seed-*.csv"):
            rows = list(csv.DictReader(path.open(newline="")))
            header = list(rows[0])
            for row in rows:
                row["loss"] = repr(float(row["loss"]) + 1e3)
            with path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
                writer.writeheader()
                writer.writerows(rows)
        assert main(["bounds", *self.ARGS, "--out", out]) == EXIT_VIOLATION

    def test_bounds_refuse_other_config(self, tmp_path):
        out = str(tmp_path / "case2")
        assert main(["train", *self.ARGS, "--out", out]) == EXIT_OK
        assert main(["bounds", "--set", "case=II", "--set", "seeds=0-19",
                     "--set", "rounds=299", "--out", out]) == EXIT_CONFIG


@pytest.mark.slow
class TestCaseIFlow:
    def test_smooth_bound_holds_on_ridge(self, tmp_path):
        args = ["--set", "seeds=0-19", "--out", str(tmp_path / "case1")]
        assert main(["train", *args]) == EXIT_OK
        assert main(["bounds", *args]) == EXIT_OK
        summary = read_json(tmp_path / "case1" / REPORTS_DIR / "case1-normalized-smooth.json")
        assert summary["passed"] and summary["seeds"] == 20
        assert summary["violations"] == []

    def test_smooth_bound_holds_on_classifier(self, tmp_path):
        args = ["--config", str(CONFIGS / "case1_classifier.env"), "--set", "rounds=300",
                "--strategy", "normalized", "--out", str(tmp_path / "classifier")]
        assert main(["train", *args]) == EXIT_OK
        assert main(["bounds", *args]) == EXIT_OK
        report = tmp_path / "classifier" / REPORTS_DIR / "case1-normalized-smooth.json"
        summary = read_json(report)
        assert summary["passed"] and summary["seeds"] == 20
